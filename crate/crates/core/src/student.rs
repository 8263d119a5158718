//! The student backbone: a toy ViT or a toy E-RADIO behind one interface.

use serde::{Deserialize, Serialize};

use crate::eradio::{eradio_flops, eradio_forward, ERadioConfig};
use crate::error::{Error, Result};
use crate::nn::Scope;
use crate::numerics::{Element, Graph, ParamStore, Var};
use crate::vit::{vit_flops, vit_forward, AttnMode, PosWindow, StudentOutput, ViTConfig};

/// Parameter prefix of the backbone.
pub const STUDENT_PREFIX: &str = "student";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentKind {
    #[default]
    Vit,
    Eradio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    pub kind: StudentKind,
    pub vit: ViTConfig,
    pub eradio: ERadioConfig,
    /// Sample a ViTDet window from `vit.window_sizes` every step.
    pub vitdet: bool,
    /// Sample a random CPE crop every step.
    pub cpe_augment: bool,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self { kind: StudentKind::Vit, vit: ViTConfig::default(), eradio: ERadioConfig::default(), vitdet: false, cpe_augment: true }
    }
}

impl StudentConfig {
    pub fn embed_dim(&self) -> usize {
        match self.kind {
            StudentKind::Vit => self.vit.embed_dim,
            StudentKind::Eradio => self.eradio.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            StudentKind::Vit => self.vit.validate(),
            StudentKind::Eradio => self.eradio.validate(),
        }
    }

    /// Fails when the student cannot run at `resolution`.
    pub fn check_resolution(&self, resolution: usize) -> Result<()> {
        let res = match self.kind {
            StudentKind::Vit if self.vitdet => self.vit.check_resolution(resolution),
            StudentKind::Vit => self.vit.grid_for(resolution).map(|_| ()),
            StudentKind::Eradio => self.eradio.stage_sides(resolution).map(|_| ()),
        };
        res.map_err(|e| Error::Config(format!("student cannot run at {resolution}px: {e}")))
    }

    /// Output grid side at `resolution`.
    pub fn grid(&self, resolution: usize) -> Result<usize> {
        match self.kind {
            StudentKind::Vit => self.vit.grid_for(resolution),
            StudentKind::Eradio => self.eradio.output_side(resolution),
        }
    }

    pub fn init<T: Element>(&self, seed: u64) -> Result<ParamStore<T>> {
        match self.kind {
            StudentKind::Vit => self.vit.init(seed, STUDENT_PREFIX),
            StudentKind::Eradio => self.eradio.init(seed, STUDENT_PREFIX),
        }
    }

    pub fn num_params(&self) -> usize {
        match self.kind {
            StudentKind::Vit => self.vit.num_params(),
            StudentKind::Eradio => self.eradio.num_params(),
        }
    }

    pub fn flops(&self, resolution: usize) -> Result<u64> {
        match self.kind {
            StudentKind::Vit => vit_flops(&self.vit, resolution),
            StudentKind::Eradio => eradio_flops(&self.eradio, resolution),
        }
    }

    /// Forward over `[B,3,R,R]`. `attn` and `pos_window` only apply to the ViT.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: Var,
        attn: AttnMode,
        pos_window: PosWindow,
    ) -> Result<StudentOutput> {
        let scope = Scope::new(store, STUDENT_PREFIX);
        match self.kind {
            StudentKind::Vit => vit_forward(g, &self.vit, &scope, images, attn, pos_window),
            StudentKind::Eradio => eradio_forward(g, &self.eradio, &scope, images).map(|(o, _)| o),
        }
    }
}

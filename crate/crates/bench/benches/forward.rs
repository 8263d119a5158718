use agglo_bench::students;
use agglo_core::numerics::{Graph, ParamStore, Tensor};
use agglo_core::teachers::{make_synthetic_teacher, teacher_forward, TeacherConfig, TeacherProfile};
use agglo_core::vit::{AttnMode, FULL_WINDOW};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn student_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("student_forward");
    group.sample_size(20);
    for (name, student, res) in students() {
        let params: ParamStore<f32> = student.init(0).unwrap();
        let input = Tensor::<f32>::full([1, 3, res, res], 0.5);
        group.bench_with_input(BenchmarkId::new(name, res), &res, |b, _| {
            b.iter(|| {
                let mut g = Graph::<f32>::new();
                let x = g.constant(input.clone());
                let out = student.forward(&mut g, &params, x, AttnMode::Plain, FULL_WINDOW).unwrap();
                std::hint::black_box(g.value(out.spatial).numel())
            })
        });
    }
    group.finish();
}

fn teacher(c: &mut Criterion) {
    let mut group = c.benchmark_group("teacher_forward");
    group.sample_size(20);
    for p in [TeacherProfile::ClipLike, TeacherProfile::DinoLike, TeacherProfile::SamLike] {
        let spec = make_synthetic_teacher(1, &TeacherConfig::new(p, 1)).unwrap();
        let res = spec.native_resolution;
        let input = Tensor::<f32>::full([1, 3, res, res], 0.5);
        group.bench_function(p.id(), |b| b.iter(|| std::hint::black_box(teacher_forward(&spec, &input).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, student_forward, teacher);
criterion_main!(benches);

//! Criterion benchmarks for the hot paths: sparse propagation, student
//! forward pass, and full-catalog ranking with either embedding table.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use glrec::dataset::{synth_blocks, InteractionSet};
use glrec::eval::rank_all;
use glrec::numkit::{spmm, Rng};
use glrec::student::StudentModel;
use glrec::teacher::TeacherModel;

struct Fixture {
    train: InteractionSet,
    teacher: TeacherModel,
    student: StudentModel,
}

fn fixture(users: usize, items: usize, layers: usize) -> Fixture {
    let mut rng = Rng::new(42);
    let loaded = synth_blocks(users, items, 8, 20, 0.9, &mut rng);
    let train = InteractionSet::new(users, items, loaded.edges).unwrap();
    let mut teacher =
        TeacherModel::new(&train, 32, layers, false, &mut rng.split(1)).unwrap();
    teacher.propagate().unwrap();
    let student = StudentModel::new(
        users,
        items,
        32,
        2,
        0.01,
        &mut rng.split(2),
        &mut rng.split(3),
    )
    .unwrap();
    Fixture {
        train,
        teacher,
        student,
    }
}

fn bench_spmm(c: &mut Criterion) {
    let mut group = c.benchmark_group("spmm");
    for &users in &[500usize, 2000] {
        let fx = fixture(users, users / 2, 3);
        group.bench_with_input(BenchmarkId::from_parameter(users), &fx, |b, fx| {
            b.iter(|| spmm(&fx.teacher.adjacency, black_box(&fx.teacher.embeddings)).unwrap())
        });
    }
    group.finish();
}

fn bench_teacher_propagate(c: &mut Criterion) {
    let mut group = c.benchmark_group("teacher_propagate");
    for &layers in &[2usize, 4, 6] {
        let mut fx = fixture(1000, 500, layers);
        group.bench_with_input(BenchmarkId::from_parameter(layers), &(), |b, _| {
            b.iter(|| {
                fx.teacher.propagate().unwrap();
                black_box(fx.teacher.readout().unwrap().values[0])
            })
        });
    }
    group.finish();
}

fn bench_student_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("student_forward_all");
    for &users in &[500usize, 2000] {
        let fx = fixture(users, users / 2, 3);
        group.bench_with_input(BenchmarkId::from_parameter(users), &fx, |b, fx| {
            b.iter(|| {
                let (h, _) = fx.student.forward_all().unwrap();
                black_box(h.values[0])
            })
        });
    }
    group.finish();
}

fn bench_full_ranking(c: &mut Criterion) {
    let fx = fixture(1000, 500, 3);
    let teacher_emb = fx.teacher.readout().unwrap().clone();
    let (student_emb, _) = fx.student.forward_all().unwrap();
    let mut group = c.benchmark_group("rank_all_top20");
    group.sample_size(20);
    group.bench_function("teacher_readout", |b| {
        b.iter(|| {
            black_box(rank_all(
                &teacher_emb,
                fx.student.user_count,
                fx.student.item_count,
                &[],
                &fx.train,
                20,
            ))
        })
    });
    group.bench_function("student_forward", |b| {
        b.iter(|| {
            black_box(rank_all(
                &student_emb,
                fx.student.user_count,
                fx.student.item_count,
                &[],
                &fx.train,
                20,
            ))
        })
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_spmm,
    bench_teacher_propagate,
    bench_student_forward,
    bench_full_ranking
);
criterion_main!(benches);

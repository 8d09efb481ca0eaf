// SPDX-License-Identifier: Apache-2.0

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qcclosure_bench::spin_boson;
use qcclosure_core::{compute_i, compute_j};
use std::hint::black_box;

fn kernel_tables(c: &mut Criterion) {
    let mut group = c.benchmark_group("kernel_tables");
    group.sample_size(20);
    for n in [2, 8, 16] {
        let (closure, state) = spin_boson(n, "regularized");
        let setup = closure.kernel.clone().unwrap();
        group.bench_with_input(BenchmarkId::new("compute_i", n), &state, |b, s| {
            b.iter(|| compute_i(&closure.hamiltonian, black_box(&s.points), &s.weights, &setup).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("compute_j", n), &state, |b, s| {
            b.iter(|| compute_j(black_box(&s.points), &s.weights, &setup).unwrap())
        });
    }
    group.finish();
}

fn right_hand_sides(c: &mut Criterion) {
    let mut group = c.benchmark_group("rhs");
    group.sample_size(20);
    for n in [2, 8, 16] {
        for model in ["ehrenfest", "meanfield", "regularized"] {
            let (closure, state) = spin_boson(n, model);
            group.bench_with_input(BenchmarkId::new(model, n), &state, |b, s| {
                b.iter(|| closure.rhs(black_box(s)).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, kernel_tables, right_hand_sides);
criterion_main!(benches);

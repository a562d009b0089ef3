use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use inwin_bench::head;
use inwin_core::attention::{dense_attention, windowed_attention};
use inwin_core::mask::{materialize_mask, sparsity};
use inwin_core::{AttentionScale, TokenGrid, WindowSpec};

type Case = (&'static str, (usize, usize, usize), (usize, usize));

/// Target grid at 2x the native grid per axis, window at the native extents.
const CASES: &[Case] = &[
    ("8x12->16x24", (1, 16, 24), (12, 8)),
    ("12x20->24x40", (1, 24, 40), (20, 12)),
    ("2f 8x12->16x24", (2, 16, 24), (12, 8)),
];

fn kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("self_attention");
    group.sample_size(10);
    for &(name, (f, h, w), (ww, wh)) in CASES {
        let grid = TokenGrid::new(f, h, w).unwrap();
        let window = WindowSpec::new(ww, wh).unwrap();
        let t = head(&grid, 16, 1);
        let scale = AttentionScale::inverse_sqrt(16);
        let s = sparsity(&window, &grid);
        eprintln!("{name}: mask sparsity {}/{}", s.numer(), s.denom());
        group.throughput(Throughput::Elements(grid.token_count() as u64));
        group.bench_with_input(BenchmarkId::new("dense", name), &t, |b, t| {
            b.iter(|| dense_attention(t, scale).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("windowed", name), &t, |b, t| {
            b.iter(|| windowed_attention(t, &window, &grid, scale).unwrap())
        });
    }
    group.finish();
}

fn masks(c: &mut Criterion) {
    let mut group = c.benchmark_group("materialize_mask");
    for &(name, (_, h, w), (ww, wh)) in CASES {
        let grid = TokenGrid::new(1, h, w).unwrap();
        let window = WindowSpec::new(ww, wh).unwrap();
        group.bench_function(name, |b| {
            b.iter(|| materialize_mask(&window, &grid).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, kernels, masks);
criterion_main!(benches);

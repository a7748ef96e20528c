//! Compares the data-parallel map against the sequential fallback on the two
//! real batched payloads of the crate: per-sample Cauchy-space apertures (the
//! sweep unit) and Green-column batches (the symmetry-check unit). Both maps
//! preserve input order, so the outputs are identical; only throughput differs.

use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};

use cauchylab::cauchy::{aperture, generate_cauchy_space, BoundaryMetric};
use cauchylab::geometry::{fixtures, Spacing};
use cauchylab::green::green_column;
use cauchylab::{
    AffineCoeff, DiscreteOperator, GridDomain, Impedance, NodeClass, PiecewiseLinearPotential,
};

fn pair_for(i: u64) -> (PiecewiseLinearPotential, PiecewiseLinearPotential) {
    let t = i as f64 * 0.07;
    let q1 = PiecewiseLinearPotential::new(
        vec![
            AffineCoeff {
                a: 0.4 + t,
                grad: [0.15, -0.1, 0.0],
            },
            AffineCoeff {
                a: -0.3,
                grad: [0.05, 0.2, 0.0],
            },
        ],
        3.0,
    );
    let q2 = PiecewiseLinearPotential::new(
        vec![
            AffineCoeff {
                a: 0.4,
                grad: [0.15, -0.1, 0.0],
            },
            AffineCoeff {
                a: -0.3 - t,
                grad: [0.05, 0.2, 0.0],
            },
        ],
        3.0,
    );
    (q1, q2)
}

/// One sweep sample: assemble both operators, generate both Cauchy spaces,
/// measure the aperture. Exactly the per-sample payload of `stability_sweep`.
fn sample_aperture(dom: &Arc<GridDomain>, metric: &BoundaryMetric, i: u64) -> f64 {
    let (q1, q2) = pair_for(i);
    let bc = Impedance::default();
    let op1 = DiscreteOperator::assemble(dom, &q1, bc).unwrap();
    let op2 = DiscreteOperator::assemble(dom, &q2, bc).unwrap();
    let s1 = generate_cauchy_space(&op1, metric, 6).unwrap();
    let s2 = generate_cauchy_space(&op2, metric, 6).unwrap();
    aperture(&s1, &s2).unwrap().value
}

fn bench_sweep_samples(c: &mut Criterion) {
    let spec = fixtures::two_half_square(Spacing::Value(0.0625));
    let dom = Arc::new(GridDomain::build_physical(&spec).unwrap());
    let metric = BoundaryMetric::from_domain(&dom).unwrap();
    let items: Vec<u64> = (0..4).collect();

    let mut g = c.benchmark_group("sweep_samples");
    g.sample_size(10);
    g.bench_function("parallel_feature", |b| {
        b.iter(|| {
            cauchylab::par::map_indexed(items.clone(), |i| sample_aperture(&dom, &metric, i))
        })
    });
    g.bench_function("sequential", |b| {
        b.iter(|| {
            cauchylab::par::map_sequential(items.clone(), |i| sample_aperture(&dom, &metric, i))
        })
    });
    g.finish();
}

fn bench_green_columns(c: &mut Criterion) {
    let spec = fixtures::two_half_square(Spacing::Value(0.0625));
    let dom = Arc::new(GridDomain::build_augmented(&spec).unwrap());
    let (q, _) = pair_for(1);
    let q_ext = q.extend_to_omega0(&dom).unwrap();
    let op = DiscreteOperator::assemble(&dom, &q_ext, Impedance::default()).unwrap();
    let sources: Vec<usize> = op
        .unknowns()
        .iter()
        .map(|&id| id as usize)
        .filter(|&id| dom.class[id] == NodeClass::Interior)
        .step_by(37)
        .take(8)
        .collect();

    let mut g = c.benchmark_group("green_columns");
    g.sample_size(10);
    g.bench_function("parallel_feature", |b| {
        b.iter(|| {
            cauchylab::par::map_indexed(sources.clone(), |y| {
                green_column(&op, y, [0; 3]).unwrap().values
            })
        })
    });
    g.bench_function("sequential", |b| {
        b.iter(|| {
            cauchylab::par::map_sequential(sources.clone(), |y| {
                green_column(&op, y, [0; 3]).unwrap().values
            })
        })
    });
    g.finish();
}

criterion_group!(benches, bench_sweep_samples, bench_green_columns);
criterion_main!(benches);

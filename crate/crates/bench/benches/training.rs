use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use uotkit::flow_matching::{fm_loss_and_grad, make_training_batch, velocity_net, CouplingMode, FmTrainConfig};
use uotkit::monge_gap::{mg_loss_and_grad, MgCoupling, MgTrainConfig, PointMap};
use uotkit::rng;
use uotkit_bench::lattice_pair;

fn flow_matching(c: &mut Criterion) {
    let (mu, nu) = lattice_pair(128);
    let net = velocity_net(2, &[128, 128, 128], 0).unwrap();
    for mode in [CouplingMode::Independent, CouplingMode::UnbalancedOt] {
        let cfg = FmTrainConfig { coupling_mode: mode, ..FmTrainConfig::default() };
        let mut r = rng::seeded(0, rng::stream::TRAIN);
        c.bench_function(&format!("fm_step/{}", mode.name()), |b| {
            b.iter(|| {
                let (batch, _) = make_training_batch(mu.points(), nu.points(), &cfg, &mut r).unwrap();
                black_box(fm_loss_and_grad(&net, &batch).unwrap())
            })
        });
    }
}

fn monge_gap(c: &mut Criterion) {
    let (mu, nu) = lattice_pair(64);
    let map = PointMap::new(2, &[64, 64], 0).unwrap();
    for coupling in [MgCoupling::Balanced, MgCoupling::Unbalanced] {
        let cfg = MgTrainConfig { coupling_mode: coupling, ..MgTrainConfig::default() };
        c.bench_function(&format!("mg_step/{coupling:?}"), |b| b.iter(|| black_box(mg_loss_and_grad(&map, mu.points(), nu.points(), &cfg).unwrap())));
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = flow_matching, monge_gap
}
criterion_main!(benches);

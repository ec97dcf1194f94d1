use bbcoreset::algorithms::{train_bb_psvi, TrainConfig};
use bbcoreset::coresets::{init_coreset, InitStrategy, WeightMode};
use bbcoreset::data;
use bbcoreset::models::{Model, ModelSpec};
use bbcoreset::objectives::WeightForm;
use bbcoreset::par::Exec;
use bbcoreset::predict;
use bbcoreset::rng::{self, Stream};
use bbcoreset::variational::VariationalGaussian;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const EXECS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn predictive(c: &mut Criterion) {
    let ds = data::gen_four_class(2000, 0);
    let model = Model::new(ModelSpec::bnn(2, vec![50], 4)).unwrap();
    let psi = VariationalGaussian { means: model.init_means(0), ..VariationalGaussian::new(model.param_len(), 0.1) };
    let cs = init_coreset(InitStrategy::Subset, &ds, 20, WeightMode::Softmax, 0).unwrap();
    let noise = rng::standard_normal(&mut rng::stream(0, Stream::Eval), 100, model.param_len());
    let mut g = c.benchmark_group("posterior_predictive");
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| predict::posterior_predictive(&model, &psi, Some(&cs), &ds.x, &noise, WeightForm::default(), exec).unwrap())
        });
    }
    g.finish();
}

fn training(c: &mut Criterion) {
    let ds = data::gen_half_moon(500, 0.1, 0);
    let model = Model::new(ModelSpec::bnn(2, vec![20], 2)).unwrap();
    let mut tc = TrainConfig { coreset_size: 16, ..TrainConfig::default() };
    tc.bilevel.outer_iters = 5;
    tc.bilevel.inner_steps = 5;
    tc.bilevel.mc_samples = 10;
    let mut g = c.benchmark_group("bb_psvi_5_outer_steps");
    g.sample_size(10);
    for (name, exec) in EXECS {
        tc.exec = exec;
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| train_bb_psvi(&model, &ds, None, &tc).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, predictive, training);
criterion_main!(benches);

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use stylegrid_core::feature_renderer::trace_view;
use stylegrid_core::model::StyleSource;
use stylegrid_core::toy::{self, ToyScene};
use stylegrid_core::{Model, RunConfig, SceneField};

fn pipeline(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let size = 32;
    let scene = SceneField::new(16, 2, cfg.basic_channels, ToyScene::three_spheres().bounds, 0);
    let camera = ToyScene::cameras(1, size).remove(0);
    let render = cfg.render_settings();
    let encoder = cfg.encoder().unwrap();
    let model = Model::init(cfg.model_shape(encoder.channels), cfg.variant, 0).unwrap();
    let style_img = toy::style_image(size, 1);
    let style = encoder.encode_levels(&style_img).unwrap();
    let bundle = trace_view(&scene, &camera, &render);
    let maps = model.content_maps_from_bundle(&bundle).unwrap();

    let mut g = c.benchmark_group("32x32");
    g.sample_size(20);
    g.bench_function("trace_view", |b| b.iter(|| trace_view(black_box(&scene), &camera, &render)));
    g.bench_function("content_maps", |b| b.iter(|| model.content_maps_from_bundle(black_box(&bundle)).unwrap()));
    g.bench_function("encode_levels", |b| b.iter(|| encoder.encode_levels(black_box(&style_img)).unwrap()));
    g.bench_function("decode", |b| b.iter(|| model.decode(black_box(&maps)).unwrap()));
    g.bench_function("stylize", |b| b.iter(|| model.stylize(black_box(&maps), StyleSource::single(&style)).unwrap()));
    g.finish();
}

criterion_group!(benches, pipeline);
criterion_main!(benches);

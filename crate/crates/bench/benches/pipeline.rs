use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use thermosplat_bench::desk_fixture;
use thermosplat_core::metrics::{ssim, ssim_with_grad};
use thermosplat_core::render::render;
use thermosplat_core::retinex::{enhance, EnhancerParams};
use thermosplat_core::scene::ImageRgb;

fn benches(c: &mut Criterion) {
    let (frame, gaussians) = desk_fixture();
    let cam = &frame.camera;
    let out = render(&gaussians, cam, [0.0; 3]).unwrap();
    let d_color = ImageRgb::filled(cam.width, cam.height, [1e-3; 3]);
    let gt = frame.rgb_gt_bright.clone().unwrap();
    let params = EnhancerParams::calibrated(&frame.rgb_low, 16, 12, 0.18).unwrap();

    c.bench_function("render_forward_160x120", |b| {
        b.iter(|| render(black_box(&gaussians), cam, [0.0; 3]).unwrap())
    });
    c.bench_function("render_backward_160x120", |b| {
        b.iter(|| out.backward(cam, black_box(&d_color)).unwrap())
    });
    c.bench_function("ssim_160x120", |b| b.iter(|| ssim(black_box(&out.color), &gt).unwrap()));
    c.bench_function("ssim_with_grad_160x120", |b| {
        b.iter(|| ssim_with_grad(black_box(&out.color), &gt).unwrap())
    });
    c.bench_function("enhance_160x120", |b| b.iter(|| enhance(black_box(&frame.rgb_low), &params).unwrap()));
}

criterion_group!(pipeline, benches);
criterion_main!(pipeline);

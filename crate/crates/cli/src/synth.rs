//! Deterministic fixtures for trying the commands without real data.

use std::f64::consts::PI;

use anyhow::Result;
use dforge_core::flow::{moving_square, write_flo, FlowField, MaskFrame};
use dforge_core::fusion::{render_sphere_depth, DepthSidecar};
use dforge_core::geometry::SceneBundle;
use dforge_core::loss::ImageBuffer;
use dforge_core::manifest::write_jsonl;
use dforge_core::pose::{look_at, CameraPose, PoseRecord};
use dforge_core::rng::normal_vec;
use nalgebra::Vector3;
use serde_json::{json, Value};

use crate::args::SynthKind;
use crate::run::RunContext;

pub const SPHERE_RADIUS: f64 = 0.5;
pub const SPHERE_VIEWS: usize = 24;

pub fn synth(ctx: &mut RunContext, kind: SynthKind) -> Result<Value> {
    let mut report = serde_json::Map::new();
    let kinds: &[SynthKind] = match kind {
        SynthKind::All => &[
            SynthKind::Sphere,
            SynthKind::Manifest,
            SynthKind::Flow,
            SynthKind::Images,
        ],
        _ => std::slice::from_ref(&kind),
    };
    for k in kinds {
        let (name, v) = match k {
            SynthKind::Sphere => ("sphere", sphere(ctx)?),
            SynthKind::Manifest => ("manifest", manifest(ctx)?),
            SynthKind::Flow => ("flow", flow(ctx)?),
            SynthKind::Images => ("images", images(ctx)?),
            SynthKind::All => unreachable!("expanded above"),
        };
        report.insert(name.into(), v);
    }
    Ok(Value::Object(report))
}

fn looking_at_origin(eye: Vector3<f64>) -> CameraPose {
    let mut pose = CameraPose::at(eye);
    pose.rotation = look_at(&eye, &Vector3::zeros(), &Vector3::z()).expect("eye is off the z axis");
    pose
}

/// Three rings of eight cameras at elevations -35, 0 and 35 degrees, each
/// 1.6 units from the origin and looking at it.
pub fn sphere_views() -> Vec<CameraPose> {
    let mut poses = Vec::with_capacity(SPHERE_VIEWS);
    for (ring, elev_deg) in [-35.0f64, 0.0, 35.0].into_iter().enumerate() {
        let elev = elev_deg.to_radians();
        for i in 0..8 {
            let az = 2.0 * PI * i as f64 / 8.0 + ring as f64 * PI / 8.0;
            let eye = 1.6 * Vector3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin());
            poses.push(looking_at_origin(eye));
        }
    }
    poses
}

fn sphere(ctx: &mut RunContext) -> Result<Value> {
    for (i, pose) in sphere_views().iter().enumerate() {
        let depth = render_sphere_depth(pose, &Vector3::zeros(), SPHERE_RADIUS);
        let bytes: Vec<u8> = depth.iter().flat_map(|d| d.to_le_bytes()).collect();
        ctx.write(&format!("depth/view_{i:02}.f32"), &bytes)?;
        let sidecar = DepthSidecar {
            frame_id: i as u32,
            pose: PoseRecord::from(pose),
        };
        ctx.write(
            &format!("depth/view_{i:02}.json"),
            &serde_json::to_vec_pretty(&sidecar)?,
        )?;
    }
    Ok(json!({ "dir": "depth", "views": SPHERE_VIEWS, "radius": SPHERE_RADIUS }))
}

pub fn fixture_scenes() -> Vec<SceneBundle> {
    let ring = |id: &str, n: usize, sweep: f64, closed: bool| {
        let denom = if closed { n as f64 } else { (n - 1) as f64 };
        let poses = (0..n)
            .map(|i| {
                let a = sweep * i as f64 / denom;
                looking_at_origin(Vector3::new(3.0 * a.cos(), 3.0 * a.sin(), 0.0))
            })
            .collect();
        SceneBundle::new(id, "synthetic", poses)
    };
    let line = (0..12)
        .map(|i| {
            let mut p = CameraPose::at(Vector3::new(-2.0 + 4.0 * i as f64 / 11.0, -3.0, 0.0));
            p.rotation = look_at(&p.position, &(p.position + Vector3::y()), &Vector3::z())
                .expect("not vertical");
            p
        })
        .collect();
    vec![
        ring("ring_36", 36, 2.0 * PI, true),
        ring("arc_120", 16, 120f64.to_radians(), false),
        SceneBundle::new("dolly_line", "synthetic", line),
    ]
}

fn manifest(ctx: &mut RunContext) -> Result<Value> {
    let scenes = fixture_scenes();
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &scenes)?;
    ctx.write("scenes.jsonl", &buf)?;
    Ok(json!({ "file": "scenes.jsonl", "scenes": scenes.len() }))
}

fn write_clip(ctx: &mut RunContext, dir: &str, frames: &[(FlowField, MaskFrame)]) -> Result<()> {
    for (i, (f, m)) in frames.iter().enumerate() {
        let mut buf = Vec::new();
        write_flo(&mut buf, f)?;
        ctx.write(&format!("{dir}/frame_{i:03}.flo"), &buf)?;
        let img = image::GrayImage::from_raw(
            m.width as u32,
            m.height as u32,
            m.mask.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        )
        .expect("mask size matches");
        let mut png = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)?;
        ctx.write(&format!("{dir}/frame_{i:03}.mask.png"), &png)?;
    }
    Ok(())
}

fn flow(ctx: &mut RunContext) -> Result<Value> {
    let (w, h) = (64, 48);
    // The square grows over the clip so the reference choice is not a tie.
    let object: Vec<_> = (0..8)
        .map(|i| moving_square(w, h, 10 + i, (4 + 3 * i, 10 + i), 2.0, 1.0, i as u32))
        .collect();
    let pan: Vec<_> = (0..8)
        .map(|i| {
            let f = FlowField::uniform(w, h, 3.0, 0.0, i as u32);
            let m = MaskFrame {
                width: w,
                height: h,
                mask: vec![false; w * h],
                frame_index: i as u32,
            };
            (f, m)
        })
        .collect();
    write_clip(ctx, "flow_object", &object)?;
    write_clip(ctx, "flow_pan", &pan)?;
    Ok(json!({ "dirs": ["flow_object", "flow_pan"], "frames": 8, "width": w, "height": h }))
}

fn images(ctx: &mut RunContext) -> Result<Value> {
    let (w, h) = (48, 40);
    let mut gt = ImageBuffer::filled(w, h, 0.0);
    for r in 0..h {
        for c in 0..w {
            let x = c as f64 / w as f64;
            let y = r as f64 / h as f64;
            gt.set(r, c, 0, 0.2 + 0.6 * x);
            gt.set(r, c, 1, 0.5 + 0.3 * (6.0 * y).sin());
            gt.set(r, c, 2, 0.5 + 0.4 * (x - y));
        }
    }
    let noise = normal_vec(ctx.config.rng_seed, 0, w * h * 3);
    let pred = ImageBuffer::new_clamped(
        w,
        h,
        gt.data()
            .iter()
            .zip(&noise)
            .map(|(g, n)| g + 0.05 * n)
            .collect(),
    )?;
    let conf: Vec<u8> = (0..w * h)
        .map(|i| {
            let (r, c) = (
                (i / w) as f64 - h as f64 / 2.0,
                (i % w) as f64 - w as f64 / 2.0,
            );
            (255.0 * (-(r * r + c * c) / 400.0).exp()).round() as u8
        })
        .collect();
    let encode_rgb = |img: &ImageBuffer| -> Result<Vec<u8>> {
        let bytes: Vec<u8> = img
            .data()
            .iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect();
        let rgb = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("size matches");
        let mut png = Vec::new();
        rgb.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)?;
        Ok(png)
    };
    ctx.write("images/gt.png", &encode_rgb(&gt)?)?;
    ctx.write("images/pred.png", &encode_rgb(&pred)?)?;
    let gray = image::GrayImage::from_raw(w as u32, h as u32, conf).expect("size matches");
    let mut png = Vec::new();
    gray.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)?;
    ctx.write("images/conf.png", &png)?;
    Ok(json!({ "dir": "images", "width": w, "height": h }))
}

use std::sync::Arc;

use image::{Rgb, RgbImage};
use invi_core::attention::spill::{record_file_name, MAGIC};
use invi_core::denoiser::{
    load_pretrained, save_pretrained, HashTextEncoder, ModelDescriptor, StoredWeights, TinyUnetWeights,
};
use invi_core::pipeline::{EditConfig, EventLog, FrameInputs, Pipeline};
use invi_core::roi::{composite_back, crop_and_encode, expand_boxes, BoxTrack, Rect};
use invi_core::vae::BlockCodec;

fn frame(i: u32) -> RgbImage {
    RgbImage::from_fn(96, 80, |x, y| Rgb([(x / 8 * 20 + i) as u8, (y / 8 * 25) as u8, 128]))
}

fn config() -> EditConfig {
    EditConfig {
        prompt: "a green cube".into(),
        steps_train: 200,
        steps_infer: 3,
        guidance_scale: 2.5,
        crop_w: 64,
        crop_h: 64,
        ..EditConfig::default()
    }
}

fn prepare(p: &Pipeline, track: &BoxTrack) -> (Vec<RgbImage>, Vec<Rect>, Vec<FrameInputs>) {
    let frames: Vec<_> = (0..track.n_frames() as u32).map(frame).collect();
    let roi = expand_boxes(track, 96, 80, p.cfg.crop_w, p.cfg.crop_h, p.cfg.margin).unwrap();
    let inputs = frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let e = crop_and_encode(f, roi.crops[i], roi.boxes[i], &p.vae, i + 1).unwrap();
            FrameInputs {
                bg_latent: e.bg_latent,
                masked_bg_latent: e.masked_bg_latent,
                mask: e.mask,
                control: None,
            }
        })
        .collect();
    (frames, roi.crops, inputs)
}

#[test]
fn crops_round_trip_and_outside_pixels_survive() {
    let track = BoxTrack::parse("0 10 10 16 16\n1 14 12 16 16\n2 18 14 16 16\n").unwrap();
    let p = Pipeline::from_config(config()).unwrap();
    let (frames, crops, inputs) = prepare(&p, &track);
    let mut log = EventLog::default();
    let res = p.run(&inputs, &mut log).unwrap();
    assert_eq!(log.events.len(), 3);
    for ((f, c), edited) in frames.iter().zip(&crops).zip(&res.crops) {
        let out = composite_back(f, *c, edited).unwrap();
        for (x, y, px) in out.enumerate_pixels() {
            if !c.contains_point(x, y) {
                assert_eq!(px, f.get_pixel(x, y));
            }
        }
    }
}

#[test]
fn spill_files_follow_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config();
    cfg.cache_spill_dir = Some(dir.path().to_path_buf());
    let track = BoxTrack::parse("0 10 10 16 16\n1 14 12 16 16\n").unwrap();
    let p = Pipeline::from_config(cfg).unwrap();
    let (_, _, inputs) = prepare(&p, &track);
    p.run(&inputs, &mut ()).unwrap();
    let t = p.timesteps()[0];
    let bytes = std::fs::read(dir.path().join(record_file_name(1, t))).unwrap();
    assert_eq!(&bytes[0..4], MAGIC);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    // The last anchor written is frame 2.
    assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
    assert_eq!((u32_at(16), u32_at(20)), (1, t));
    let (tokens, kw, vw) = (u32_at(24) as usize, u32_at(28) as usize, u32_at(32) as usize);
    assert_eq!(bytes.len(), 36 + 4 * tokens * (kw + vw));
    assert_eq!(record_file_name(1, t), format!("l001_t{t:05}.ivkv"));
}

#[test]
fn stored_weights_load_through_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let w = TinyUnetWeights::seeded(17, 8, 2, 8);
    save_pretrained(dir.path(), StoredWeights::TinyUnet(&w)).unwrap();
    let mut cfg = config();
    cfg.set("denoiser", dir.path().to_str().unwrap()).unwrap();
    let from_cfg = Pipeline::from_config(cfg.clone()).unwrap();
    let direct = Pipeline::new(
        cfg,
        load_pretrained(&ModelDescriptor::Path(dir.path().into()), None).unwrap(),
        Arc::new(BlockCodec::toy()),
        &HashTextEncoder::default(),
    )
    .unwrap();
    let track = BoxTrack::parse("0 10 10 16 16\n1 12 10 16 16\n").unwrap();
    let (_, _, inputs) = prepare(&from_cfg, &track);
    let a = from_cfg.run(&inputs, &mut ()).unwrap();
    let b = direct.run(&inputs, &mut ()).unwrap();
    for (x, y) in a.latents.iter().zip(&b.latents) {
        assert_eq!(x.data, y.data);
    }
}

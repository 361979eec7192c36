mod common;

use common::{normal, rel_err, rng};
use masked_distill::masking::{block_mask, random_mask, BinaryMask, PatchGrid};
use masked_distill::model::{
    load_checkpoint, patchify, read_teacher_features, save_checkpoint, unpatchify, write_teacher_features,
    Checkpoint, EncodingMode, Image, ModelConfig, ParamSet, Pooling, Student, SyntheticTeacher, TeacherFeatures,
    TeacherProvider,
};
use masked_distill::objectives::{rep_loss, LossConfig};
use masked_distill::rng::{substream, tag};
use masked_distill::tensor::{Tape, Tensor};
use masked_distill::Error;
use rand::Rng as _;

fn toy(mode: EncodingMode) -> (Student, ParamSet) {
    let cfg = ModelConfig {
        encoding_mode: mode,
        ..ModelConfig::toy()
    };
    let s = Student::new(&cfg).unwrap();
    let p = s.init(&mut substream(7, &[tag::INIT]));
    (s, p)
}

fn image(seed: u64) -> Image {
    let mut r = rng(seed);
    Image::new(32, 32, 3, (0..32 * 32 * 3).map(|_| r.random::<f64>()).collect()).unwrap()
}

/// Encoder outputs (cls, patch rows) as plain tensors.
fn encode(s: &Student, p: &ParamSet, patches: &Tensor, mask: &BinaryMask, dense: bool) -> (Tensor, Tensor) {
    let mut t = Tape::new();
    let vars = s.register(&mut t, p, false).unwrap();
    let x = t.constant(patches.clone());
    let o = if dense {
        s.encode_dense(&mut t, &vars, x, mask, false).unwrap()
    } else {
        s.encode_sparse(&mut t, &vars, x, mask, false).unwrap()
    };
    (t.value(o.cls).clone(), t.value(o.patch_tokens).clone())
}

#[test]
fn patchify_round_trip_random() {
    let img = image(1);
    let p = patchify::<f64>(&img, 4).unwrap();
    assert_eq!(p.shape(), &[64, 48]);
    assert_eq!(unpatchify(&p, 32, 32, 3, 4).unwrap(), img);
    assert!(matches!(patchify::<f64>(&img, 5), Err(Error::Config(_))));
}

#[test]
fn all_visible_dense_ignores_mask_token() {
    let (s, p) = toy(EncodingMode::Dense);
    let x = patchify(&image(2), 4).unwrap();
    let vis = BinaryMask::all_visible(64);
    let base = encode(&s, &p, &x, &vis, true);
    let mut q = p.clone();
    q.by_name_mut("encoder.mask_token").unwrap().data_mut().iter_mut().for_each(|v| *v = 9.0);
    assert_eq!(encode(&s, &q, &x, &vis, true), base);
}

#[test]
fn fully_masked_dense_ignores_pixels() {
    let (s, p) = toy(EncodingMode::Dense);
    let all = BinaryMask::new(vec![true; 64], 1.0).unwrap();
    let a = encode(&s, &p, &patchify(&image(3), 4).unwrap(), &all, true);
    let b = encode(&s, &p, &patchify(&image(4), 4).unwrap(), &all, true);
    assert_eq!(a, b);
}

#[test]
fn swapping_patches_with_positions_permutes_rows() {
    let (s, p) = toy(EncodingMode::Dense);
    let x = patchify(&image(5), 4).unwrap();
    let vis = BinaryMask::all_visible(64);
    let (cls, rows) = encode(&s, &p, &x, &vis, true);
    let (i, j) = (3, 41);
    let swap_rows = |t: &Tensor| {
        let mut out = t.clone();
        let c = t.cols();
        for k in 0..c {
            out.data_mut()[i * c + k] = t.at(j, k);
            out.data_mut()[j * c + k] = t.at(i, k);
        }
        out
    };
    let mut q = p.clone();
    let pos = swap_rows(q.by_name("encoder.pos").unwrap());
    *q.by_name_mut("encoder.pos").unwrap() = pos;
    let (cls2, rows2) = encode(&s, &q, &swap_rows(&x), &vis, true);
    let expect = swap_rows(&rows);
    for (a, b) in rows2.data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-10);
    }
    for (a, b) in cls2.data().iter().zip(cls.data()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn sparse_at_zero_ratio_is_dense() {
    let (s, p) = toy(EncodingMode::Sparse);
    let x = patchify(&image(6), 4).unwrap();
    let vis = BinaryMask::all_visible(64);
    assert_eq!(encode(&s, &p, &x, &vis, false), encode(&s, &p, &x, &vis, true));
}

#[test]
fn sparse_token_count_and_content_dependence() {
    let (s, p) = toy(EncodingMode::Sparse);
    let g = PatchGrid::new(8, 8, 4).unwrap();
    let m = random_mask(&g, 0.75, &mut rng(7)).unwrap();
    let x = patchify(&image(8), 4).unwrap();
    let (cls, rows) = encode(&s, &p, &x, &m, false);
    assert_eq!(rows.rows() + 1, 17);
    // Different content at masked positions changes nothing.
    let mut y = x.clone();
    let other = patchify(&image(9), 4).unwrap();
    for i in m.masked_indices() {
        for k in 0..48 {
            y.data_mut()[i * 48 + k] = other.at(i, k);
        }
    }
    assert_eq!(encode(&s, &p, &y, &m, false), (cls, rows));
}

#[test]
fn decoder_shapes_and_constant_probe() {
    let (s, mut p) = toy(EncodingMode::Dense);
    let g = PatchGrid::new(8, 8, 4).unwrap();
    let m = block_mask(&g, 0.4, &mut rng(10)).unwrap();
    let x = patchify(&image(11), 4).unwrap();
    let decode = |p: &ParamSet, m: &BinaryMask| {
        let mut t = Tape::new();
        let vars = s.register(&mut t, p, false).unwrap();
        let xv = t.constant(x.clone());
        let o = s.encode_dense(&mut t, &vars, xv, m, false).unwrap();
        let d = s.decode(&mut t, &vars, &o, m).unwrap();
        t.value(d.pixels).clone()
    };
    assert_eq!(decode(&p, &m).shape(), &[m.masked_count(), 48]);
    assert_eq!(decode(&p, &BinaryMask::all_visible(64)).shape(), &[0, 48]);

    let [_, bias] = s.pixel_head_names();
    let bias = bias.to_string();
    let names: Vec<String> = p.names().to_vec();
    for n in names.iter().filter(|n| n.starts_with("decoder.")) {
        p.by_name_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let b: Vec<f64> = (0..48).map(|i| i as f64 * 0.01 - 0.2).collect();
    p.by_name_mut(&bias).unwrap().data_mut().copy_from_slice(&b);
    let out = decode(&p, &m);
    for r in 0..out.rows() {
        assert_eq!(out.row(r), &b[..]);
    }
}

fn square_head() -> (Student, ParamSet) {
    let cfg = ModelConfig {
        teacher_dim: 64,
        ..ModelConfig::toy()
    };
    let s = Student::new(&cfg).unwrap();
    let p = s.init(&mut substream(1, &[]));
    (s, p)
}

fn project(s: &Student, p: &ParamSet, v: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let vars = s.register(&mut t, p, false).unwrap();
    let x = t.constant(v.clone());
    let y = s.project(&mut t, &vars, x).unwrap();
    t.value(y).clone()
}

#[test]
fn projection_identity_and_bias() {
    let (s, mut p) = square_head();
    let [w, b] = s.head_names().map(String::from);
    *p.by_name_mut(&w).unwrap() = Tensor::eye(64);
    p.by_name_mut(&b).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let v = normal(&[1, 64], &mut rng(12));
    assert_eq!(project(&s, &p, &v), v);
    p.by_name_mut(&w).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let bias = normal(&[64], &mut rng(13));
    *p.by_name_mut(&b).unwrap() = bias.clone();
    assert_eq!(project(&s, &p, &v).data(), bias.data());
}

#[test]
fn rep_loss_gradient_wrt_head() {
    let (s, p) = toy(EncodingMode::Dense);
    let [w, _] = s.head_names().map(String::from);
    let tokens = normal(&[5, 64], &mut rng(14));
    let teacher = normal(&[5, 96], &mut rng(15));
    let run = |p: &ParamSet| {
        let mut t = Tape::new();
        let vars = s.register(&mut t, p, true).unwrap();
        let x = t.constant(tokens.clone());
        let pred = s.project(&mut t, &vars, x).unwrap();
        let tv = t.constant(teacher.clone());
        let l = rep_loss(&mut t, pred, tv, 1.0, 1e-6).unwrap();
        let idx = p.names().iter().position(|n| *n == w).unwrap();
        let g = t.backward(l).unwrap().get(vars[idx]);
        (t.value(l).item().unwrap(), g)
    };
    let (_, g) = run(&p);
    let mut r = rng(16);
    for _ in 0..40 {
        let i = r.random_range(0..64 * 96);
        let h = 1e-5;
        let mut a = p.clone();
        a.by_name_mut(&w).unwrap().data_mut()[i] += h;
        let mut b = p.clone();
        b.by_name_mut(&w).unwrap().data_mut()[i] -= h;
        let fd = (run(&a).0 - run(&b).0) / (2.0 * h);
        assert!(rel_err(g.data()[i], fd, 1e-6) < 1e-4);
    }
}

#[test]
fn teacher_is_deterministic_and_image_sensitive() {
    let cfg = ModelConfig::toy();
    let t = SyntheticTeacher::new(&cfg).unwrap();
    let img = image(17);
    assert_eq!(t.forward(&img).unwrap(), t.forward(&img).unwrap());
    assert_eq!(SyntheticTeacher::new(&cfg).unwrap().params(), t.params());
    let cls: Vec<Vec<f64>> = (0..100).map(|i| t.forward(&image(100 + i)).unwrap().cls).collect();
    for i in 0..cls.len() {
        for j in i + 1..cls.len() {
            assert_ne!(cls[i], cls[j]);
        }
    }
}

#[test]
fn teacher_file_round_trip_and_lookup() {
    let cfg = ModelConfig::toy();
    let t = SyntheticTeacher::new(&cfg).unwrap();
    let mut feats = TeacherFeatures::new(64, t.dim());
    let imgs: Vec<Image> = (0..5).map(|i| image(200 + i)).collect();
    for img in &imgs {
        feats.insert(img.content_hash(), &t.forward(img).unwrap()).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.medt");
    write_teacher_features(&path, &feats).unwrap();
    let back = read_teacher_features(&path).unwrap();
    assert_eq!(back, feats);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"MEDT");
    let provider = TeacherProvider::File(back);
    assert_eq!(&provider.forward(&imgs[2]).unwrap(), feats.get(&imgs[2].content_hash()).unwrap());
    assert!(matches!(provider.forward(&image(999)), Err(Error::Lookup(_))));
}

#[test]
fn attention_rows_are_stochastic() {
    let (s, p) = toy(EncodingMode::Dense);
    let a = s.probe_attention(&p, &patchify(&image(18), 4).unwrap(), true).unwrap();
    assert_eq!(a.n(), 64);
    for i in 0..64 {
        assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn embeddings_are_deterministic_and_sized() {
    let (s, p) = toy(EncodingMode::Dense);
    let x = patchify(&image(19), 4).unwrap();
    let a = s.embed(&p, &x, Pooling::Cls).unwrap();
    assert_eq!(a.len(), 64);
    assert_eq!(a, s.embed(&p, &x, Pooling::Cls).unwrap());
    assert_ne!(a, s.embed(&p, &x, Pooling::Mean).unwrap());
}

#[test]
fn checkpoint_round_trip() {
    let (_, p) = toy(EncodingMode::Dense);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.medc");
    let c = Checkpoint {
        params: p.clone(),
        config: serde_json::json!({ "model": ModelConfig::toy() }),
    };
    save_checkpoint(&path, &c).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.params, p);
    assert_eq!(back.config, c.config);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xFF;
    assert!(Checkpoint::from_bytes(&bytes).is_err());
}

#[test]
fn paper_encoder_matches_vit_b_count() {
    let cfg = ModelConfig {
        stochastic_depth: 0.0,
        ..ModelConfig::paper()
    };
    // ViT-B/16 at 224 px without a classifier head.
    assert_eq!(cfg.vit_formula_params(), 85_798_656);
    let s = Student::new(&cfg).unwrap();
    let d = cfg.hidden_dim;
    let encoder = s.layout().count_matching(|n| n.starts_with("encoder."));
    let mask_token = s.layout().count_matching(|n| n == "encoder.mask_token");
    assert_eq!(mask_token, if cfg.encoding_mode == EncodingMode::Dense { d } else { 0 });
    // The position table has no CLS row.
    assert_eq!(encoder - mask_token + d, cfg.vit_formula_params());
}

#[test]
fn loss_config_defaults() {
    let l = LossConfig::default();
    assert_eq!(l.smooth_l1_beta, 1.0);
    assert_eq!(l.disc_temperature, 1.0);
}

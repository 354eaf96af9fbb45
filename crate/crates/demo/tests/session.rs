use fomo_core::checkpoint::{encode_records, Bundle};
use fomo_core::encoder::encode_frames;
use fomo_demo::{Models, Session};

#[test]
fn perturbations_change_the_view_only() {
    let mut s = Session::new("T4", 3).unwrap();
    let n = s.original.trajectory.frames.len();
    s.perturb("PT_Rev", 1).unwrap();
    assert_eq!(s.view.trajectory.frames.len(), n);
    assert_eq!(s.view.trajectory.frames[0], s.original.trajectory.frames[n - 1]);
    s.perturb("PI_Comb", 1).unwrap();
    assert_ne!(s.view.instruction.text, s.original.instruction.text);
    assert_eq!(s.view.trajectory.frames, s.original.trajectory.frames);
    s.perturb("none", 0).unwrap();
    assert_eq!(s.view, s.original);
    assert!(s.perturb("PT_Nope", 0).is_err());
}

#[test]
fn frames_come_out_as_rgba() {
    let s = Session::new("T5", 7).unwrap();
    let f = &s.original.trajectory.frames[0];
    let rgba = s.frame_rgba(false, 0).unwrap();
    assert_eq!(rgba.len(), f.width * f.height * 4);
    assert!(rgba.chunks(4).all(|p| p[3] == 255));
    assert!(s.frame_rgba(false, 99).is_err());
    assert!(Session::new("T9", 0).is_err());
}

#[test]
fn curves_end_at_the_trajectory_score() {
    let s = Session::new("T5", 11).unwrap();
    let m = Models::untrained().unwrap();
    let v: serde_json::Value = serde_json::from_str(&s.curves_json(&m).unwrap()).unwrap();
    let curve: Vec<f64> = serde_json::from_value(v["original"].clone()).unwrap();
    assert_eq!(curve.len(), s.original.trajectory.frames.len());
    let vs = encode_frames(&s.original.trajectory.frames, &m.encoder).unwrap();
    let full = m.reward.score_trajectory(&s.original.instruction.tokens, &vs).unwrap();
    assert!((curve.last().unwrap() - full).abs() < 1e-9);
    assert_eq!(v["trained"], false);
}

#[test]
fn checkpoints_load_into_the_demo() {
    let m = Models::untrained().unwrap();
    let b = Bundle { lm: Some(m.reward.lm.clone()), encoder: Some(m.encoder.clone()), interface: Some(m.reward.interface.clone()), interface_training: None };
    let loaded = Models::from_checkpoint(&encode_records(&b.records().unwrap()).unwrap()).unwrap();
    assert!(loaded.trained);
    let partial = Bundle { interface: None, ..b };
    assert!(Models::from_checkpoint(&encode_records(&partial.records().unwrap()).unwrap()).is_err());
}

//! Weight manifests: itemised load errors and checkpoint round trips.

use std::fs;

use dtl_core::manifest::{load_weights, read_manifest, save_weights, Manifest};
use dtl_core::petl::{attach, AdapterSpec};
use dtl_core::train::{checkpoint_params, load_checkpoint};
use dtl_core::vit::{ViT, ViTConfig};
use dtl_core::{Error, ParamRole, ParamStore, Tensor};

fn backbone() -> ViT<f32> {
    ViT::init(ViTConfig::micro(), 4).unwrap()
}

fn rewrite(path: &std::path::Path, edit: impl FnOnce(&mut Manifest)) {
    let mut m = read_manifest(path).unwrap();
    edit(&mut m);
    fs::write(path, serde_json::to_string_pretty(&m).unwrap()).unwrap();
}

#[test]
fn missing_entry_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.json");
    let vit = backbone();
    save_weights(&vit.params, &path).unwrap();
    rewrite(&path, |m| m.tensors.retain(|t| t.name != "block.2.attn.w_q"));
    let mut target = vit.params.clone();
    let err = load_weights(&mut target, &path, true).unwrap_err();
    assert_eq!(err, Error::Manifest(vec!["missing entry block.2.attn.w_q".into()]));
}

#[test]
fn extra_entries_are_errors_only_when_strict() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.json");
    let mut src = backbone().params;
    src.add("old.head.w", Tensor::zeros(&[8, 3]), ParamRole::Weight);
    save_weights(&src, &path).unwrap();
    let mut target = backbone().params;
    let err = load_weights(&mut target, &path, true).unwrap_err();
    assert!(matches!(&err, Error::Manifest(items) if items.len() == 1 && items[0].contains("old.head.w")), "{err}");
    let warnings = load_weights(&mut target, &path, false).unwrap();
    assert_eq!(warnings.len(), 1);
    assert!(warnings[0].contains("old.head.w"));
}

#[test]
fn shape_mismatch_and_missing_are_reported_together() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.json");
    let mut src = ParamStore::<f32>::new();
    src.add("a", Tensor::zeros(&[2, 3]), ParamRole::Weight);
    save_weights(&src, &path).unwrap();
    let mut target = ParamStore::<f32>::new();
    target.add("a", Tensor::zeros(&[3, 2]), ParamRole::Weight);
    target.add("b", Tensor::zeros(&[1]), ParamRole::Bias);
    let Err(Error::Manifest(items)) = load_weights(&mut target, &path, true) else { panic!() };
    assert_eq!(items.len(), 2, "{items:?}");
    assert!(items[0].contains("a") && items[0].contains("shape"), "{items:?}");
    assert_eq!(items[1], "missing entry b");
}

#[test]
fn failed_load_leaves_target_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.json");
    let vit = backbone();
    let mut changed = vit.params.clone();
    for p in changed.iter_mut() {
        p.tensor = p.tensor.map(|x| x + 1.0);
    }
    save_weights(&changed, &path).unwrap();
    rewrite(&path, |m| m.tensors.retain(|t| t.name != "norm.beta"));
    let mut target = vit.params.clone();
    assert!(load_weights(&mut target, &path, true).is_err());
    assert!(target.bit_eq(&vit.params));
}

#[test]
fn checkpoint_restores_side_network_and_head() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let vit = backbone();
    let spec = AdapterSpec::from_name("dtl", 2).unwrap();
    let mut trained = attach(&spec, &vit, 3, 1).unwrap();
    dtl_core::checks::jitter_trainable(&mut trained.params, 0.5, 2);
    save_weights(&checkpoint_params(&trained), &path).unwrap();
    let names: Vec<String> = read_manifest(&path).unwrap().tensors.into_iter().map(|t| t.name).collect();
    assert!(names.iter().all(|n| n.starts_with("csn.") || n.starts_with("head.")), "{names:?}");

    let mut fresh = attach(&spec, &vit, 3, 9).unwrap();
    assert!(load_checkpoint(&mut fresh, &path, true).unwrap().is_empty());
    assert!(fresh.params.bit_eq(&trained.params));
}

#[test]
fn full_fine_tuning_checkpoint_holds_the_backbone() {
    let vit = backbone();
    let model = attach(&AdapterSpec::Full, &vit, 3, 0).unwrap();
    let ckpt = checkpoint_params(&model);
    assert!(ckpt.contains("block.1.attn.w_q") && ckpt.contains("head.w"));
}

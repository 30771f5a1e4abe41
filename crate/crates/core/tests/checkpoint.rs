use std::collections::BTreeMap;
use std::fs;

use hemulab::checkpoint::{load, save, CheckpointManifest, BLOB_FILE, MANIFEST_FILE};
use hemulab::conv::ConvResNetConfig;
use hemulab::model::{Model, ModelConfig};
use hemulab::tensor::Tensor;
use hemulab::tsvit::TsvitConfig;

fn tiny_tsvit() -> ModelConfig {
    ModelConfig::Tsvit(TsvitConfig { t: 2, h: 6, w: 6, c: 3, d: 8, l_t: 1, l_s: 1, heads: 2, ..TsvitConfig::default() })
}

#[test]
fn round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for (i, cfg) in [tiny_tsvit(), ModelConfig::Convresnet(ConvResNetConfig { width: 4, n_blocks: 1, channels_in: 3, patch_size: 5 })]
        .into_iter()
        .enumerate()
    {
        let path = dir.path().join(format!("m{i}"));
        let model = Model::new(&cfg, 17).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("epoch".to_string(), serde_json::json!(3));
        save(&path, &model, 17, meta.clone()).unwrap();
        let (back, manifest) = load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(manifest.metadata, meta);
        assert_eq!(manifest.config, cfg);
        let x = Tensor::from_fn(&[2, 6, 6, 3], |i| (i as f32 * 0.37).sin());
        if let (Model::Tsvit(a), Model::Tsvit(b)) = (&model, &back) {
            assert_eq!(a.predict(&x).unwrap().data(), b.predict(&x).unwrap().data());
        }
        let path2 = dir.path().join(format!("again{i}"));
        save(&path2, &back, 17, meta).unwrap();
        assert_eq!(fs::read(path.join(BLOB_FILE)).unwrap(), fs::read(path2.join(BLOB_FILE)).unwrap());
        assert_eq!(fs::read(path.join(MANIFEST_FILE)).unwrap(), fs::read(path2.join(MANIFEST_FILE)).unwrap());
    }
}

fn edit_manifest(dir: &std::path::Path, f: impl FnOnce(&mut CheckpointManifest)) {
    let p = dir.join(MANIFEST_FILE);
    let mut m: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
    f(&mut m);
    fs::write(p, serde_json::to_string(&m).unwrap()).unwrap();
}

#[test]
fn mismatched_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(&tiny_tsvit(), 1).unwrap();
    let fresh = |name: &str| {
        let p = dir.path().join(name);
        save(&p, &model, 1, BTreeMap::new()).unwrap();
        p
    };

    let p = fresh("shape");
    edit_manifest(&p, |m| m.params[0].shape[0] += 1);
    assert!(load(&p).is_err());

    let p = fresh("name");
    edit_manifest(&p, |m| m.params[1].name = "bogus".into());
    assert!(load(&p).is_err());

    let p = fresh("arch");
    edit_manifest(&p, |m| {
        if let ModelConfig::Tsvit(c) = &mut m.config {
            c.l_t = 2;
        }
    });
    assert!(load(&p).is_err());

    let p = fresh("truncated");
    let blob = fs::read(p.join(BLOB_FILE)).unwrap();
    fs::write(p.join(BLOB_FILE), &blob[..blob.len() - 8]).unwrap();
    assert!(load(&p).is_err());

    let p = fresh("format");
    edit_manifest(&p, |m| m.format = "other/9".into());
    assert!(load(&p).is_err());

    let p = fresh("unknown-field");
    let text = fs::read_to_string(p.join(MANIFEST_FILE)).unwrap();
    fs::write(p.join(MANIFEST_FILE), text.replacen('{', "{\"extra\": 1,", 1)).unwrap();
    assert!(load(&p).is_err());
}

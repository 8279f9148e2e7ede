use std::collections::HashMap;

use protomargin::explain::{
    case_report, class_activation_visualization, colormap, explain_case, overlay, prototype_gallery, render_overlay,
    weighted_activation, SourceImages, DEFAULT_TOP_N,
};
use protomargin::protonet::{ArchConfig, ModelParams};
use protomargin::synthgen::{generate_corpus, CorpusConfig};
use protomargin::trainer::{project_prototypes, TrainData, TrainItem};
use protomargin::MarginClass;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 48;

fn arch() -> ArchConfig {
    ArchConfig {
        image_size: SIZE,
        block_channels: [4, 6, 8],
        latent_channels: 8,
        prototypes_per_class: 2,
        k: 3,
        epsilon: 1e-4,
    }
}

struct Sources(HashMap<String, Vec<f64>>);

impl SourceImages for Sources {
    fn source_image(&self, id: &str) -> Option<Vec<f64>> {
        self.0.get(id).cloned()
    }
}

/// A projected toy model plus its training images.
fn projected() -> (ModelParams, Sources, Vec<Vec<f64>>) {
    let corpus = CorpusConfig {
        samples_per_class: [3; 3],
        image_size: SIZE,
        ..Default::default()
    };
    let generated = generate_corpus(&corpus, 4).unwrap();
    let items: Vec<TrainItem> = generated
        .iter()
        .map(|g| TrainItem {
            id: g.id.clone(),
            image: g.sample.image.clone(),
            label: g.sample.margin_class,
            malignant: g.sample.malignant,
            lesion_mask: g.sample.lesion_mask.clone(),
            fine_mask: None,
        })
        .collect();
    let data = TrainData::new(SIZE, items).unwrap();
    let mut params = ModelParams::init(arch(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    project_prototypes(&mut params, &data).unwrap();
    let sources = Sources(data.items.iter().map(|i| (i.id.clone(), i.image.clone())).collect());
    let images = data.items.iter().map(|i| i.image.clone()).collect();
    (params, sources, images)
}

#[test]
fn cav_of_one_map_is_that_map_normalized() {
    let pam: Vec<f64> = (0..16).map(|v| (v as f64 * 0.7).sin() + 2.0).collect();
    let cav = weighted_activation(&[&pam], &[3.0]).unwrap();
    let lo = pam.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = pam.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for (c, p) in cav.iter().zip(&pam) {
        assert!((c - (p - lo) / (hi - lo)).abs() < 1e-12);
    }
    assert_eq!(weighted_activation(&[&pam, &pam], &[1.0, 2.0]).unwrap(), cav);
    assert!(weighted_activation(&[], &[]).is_err());
}

#[test]
fn cav_spans_unit_range_and_ignores_uniform_rescaling() {
    let (params, _, images) = projected();
    let out = params.forward(&images[0]).unwrap();
    for class in MarginClass::ALL {
        let cav = class_activation_visualization(&params, &out.maps, class).unwrap();
        let lo = cav.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = cav.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
        let js: Vec<usize> = params.prototypes_of(class).collect();
        let pams: Vec<Vec<f64>> = js.iter().map(|&j| params.compute_pam(&out.maps, j).unwrap().values).collect();
        let refs: Vec<&[f64]> = pams.iter().map(|p| p.as_slice()).collect();
        let scaled: Vec<f64> = js.iter().map(|&j| 4.5 * out.maps.pooled[j]).collect();
        let again = weighted_activation(&refs, &scaled).unwrap();
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a))).unwrap();
        assert_eq!(argmax(&cav), argmax(&again));
    }
}

#[test]
fn colormap_runs_blue_to_red() {
    assert_eq!(colormap(0.0), [0, 0, 255]);
    assert_eq!(colormap(1.0), [255, 0, 0]);
    assert_eq!(colormap(0.5), [0, 255, 0]);
}

#[test]
fn overlay_contracts() {
    let image = vec![0.4; 64];
    let flat = overlay(&image, &vec![2.0; 64], 8).unwrap();
    assert!(flat.pixels.chunks(3).all(|p| p == &flat.pixels[..3]));
    let mut map = vec![0.0; 64];
    map[27] = 5.0;
    let img = overlay(&image, &map, 8).unwrap();
    // argmax pixel: half gray plus half pure red
    let g = 0.5 * 0.4;
    let want = [((g + 0.5) * 255.0f64).round() as u8, (g * 255.0f64).round() as u8, (g * 255.0f64).round() as u8];
    assert_eq!(img.get(3, 3), want);
    assert!(overlay(&image, &map[..10], 8).is_err());

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ppm"), dir.path().join("b.ppm"));
    render_overlay(&image, &map, 8, &a).unwrap();
    render_overlay(&image, &map, 8, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(std::fs::read(&a).unwrap().starts_with(b"P6\n8 8\n255\n"));
}

#[test]
fn contributions_reproduce_margin_logits() {
    let (params, _, images) = projected();
    let exp = explain_case(&params, "c", &images[2]).unwrap();
    for (row, z) in exp.contributions.iter().zip(exp.forward.margin_logits) {
        assert!((row.iter().sum::<f64>() - z).abs() < 1e-9);
    }
    assert!(exp.matches.windows(2).all(|w| w[0].similarity >= w[1].similarity));
}

#[test]
fn case_report_has_three_rows_and_is_reproducible() {
    let (params, sources, images) = projected();
    let exp = explain_case(&params, "case7", &images[5]).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = case_report(&params, &exp, Some(&sources), DEFAULT_TOP_N, a.path()).unwrap();
    case_report(&params, &exp, Some(&sources), DEFAULT_TOP_N, b.path()).unwrap();
    let html = std::fs::read_to_string(&pa).unwrap();
    assert!(html.contains("<td>"));
    let rows = html.split("<h2>Contributions</h2>").next().unwrap().matches("<tr><td>").count();
    assert_eq!(rows, 3);
    let mut names: Vec<String> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for name in &names {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name} differs"
        );
    }
    for m in exp.matches.iter().take(3) {
        for role in ["pam", "patch", "source"] {
            assert!(names.contains(&format!("case7_{}_{role}.ppm", m.prototype)), "{names:?}");
        }
    }
    assert!(names.contains(&"case7_input.ppm".to_string()));
    assert_eq!(names.iter().filter(|n| n.ends_with(".ppm")).count(), 2 + 9);
}

#[test]
fn gallery_matches_provenance_and_self_activation_peaks_there() {
    let (params, sources, _) = projected();
    let dir = tempfile::tempdir().unwrap();
    let (path, entries) = prototype_gallery(&params, &sources, dir.path()).unwrap();
    assert_eq!(entries.len(), params.num_prototypes());
    let html = std::fs::read_to_string(path).unwrap();
    assert_eq!(html.matches("<section").count(), params.num_prototypes());
    for e in &entries {
        let prov = params.provenance[e.prototype].as_ref().unwrap();
        assert_eq!((&e.image_id, e.cell), (&prov.image_id, (prov.row, prov.col)));
        // the prototype is this very patch, so its distance there is zero
        let out = params.forward(&sources.0[&e.image_id]).unwrap();
        let grid = params.arch.grid_size();
        let here = out.maps.similarities[e.prototype][prov.row * grid + prov.col];
        let best = out.maps.similarities[e.prototype].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(here, best);
    }
    let missing = Sources(HashMap::new());
    assert!(prototype_gallery(&params, &missing, dir.path()).is_err());
}

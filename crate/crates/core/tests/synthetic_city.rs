use ccgp::dataset::{generate_city, load_manifest, materialize, truth_labels, SyntheticCitySpec};
use ccgp::evaluation::{weighted_morans_i, SpatialWeights};
use ccgp::trainer::cache_neighbors;

#[test]
fn default_city_is_spatially_autocorrelated_and_connected() {
    let spec = SyntheticCitySpec::default();
    let city = generate_city(&spec).unwrap();
    assert_eq!(city.records.len(), spec.zones * spec.samples_per_zone);
    let (_, truth) = truth_labels(&city.records);
    let truth: Vec<usize> = truth.into_iter().map(Option::unwrap).collect();
    let coords: Vec<_> = city.records.iter().map(|r| r.proj).collect();
    let w = SpatialWeights::new(&coords, 100.0).unwrap();
    let moran = weighted_morans_i(&truth, &w, None).unwrap();
    assert!(moran > 0.5, "{moran}");

    let table = cache_neighbors(&city.records, 1, 150.0).unwrap();
    let lonely = table.neighborless().len();
    assert!(lonely * 100 < city.records.len(), "{lonely} neighborless records");
}

#[test]
fn materialized_city_reloads_with_identical_pixels() {
    let spec = SyntheticCitySpec {
        zones: 3,
        categories: 3,
        samples_per_zone: 5,
        extent_m: 500.0,
        ..Default::default()
    };
    let city = generate_city(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = materialize(dir.path(), &city.records, spec.image_size).unwrap();
    let back = load_manifest(&manifest).unwrap();
    assert_eq!(back.len(), city.records.len());
    for (a, b) in city.records.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.label, b.label);
        assert_eq!(a.proj, b.proj);
        let rendered = a.load_image(dir.path(), 32).unwrap().to_rgb8();
        let loaded = b.load_image(dir.path(), 32).unwrap().to_rgb8();
        assert_eq!(rendered, loaded);
    }
}

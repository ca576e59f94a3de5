fn main() {
    let spec = psnet_core::synthetic::CreatureSpec::desk_default();
    let ds = psnet_core::synthetic::generate(&spec, 8, 7).unwrap();
    for (i, s) in ds.samples.iter().enumerate().take(3) {
        psnet_core::data::save_ppm(&s.image, std::path::Path::new(&format!("/tmp/creature_{i}.ppm"))).unwrap();
        println!("class {} bbox {:?} kp {:?}", s.label, s.bbox, s.keypoints.iter().map(|k| (k.id, k.x as i32, k.y as i32, k.visible)).collect::<Vec<_>>());
    }
}

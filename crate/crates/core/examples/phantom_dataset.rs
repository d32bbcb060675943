//! Generate a few phantoms per region, write them with a manifest and read
//! them back.
//!
//! Run: `cargo run --example phantom_dataset`

use voco::volume::{generate_phantom, write_manifest, write_volume, Dataset, ManifestRecord, Split};
use voco::{PhantomSpec, Region};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    for region in Region::ALL {
        let spec = PhantomSpec::standard(region, [32, 32, 32], 11);
        for i in 0..2 {
            let mut v = generate_phantom(&spec, i).unwrap();
            let labels = v.labels().unwrap();
            let fg = labels.iter().filter(|&&c| c != 0).count() as f64 / labels.len() as f64;
            println!("{region} #{i}: {} organs, foreground {:.1}%", spec.organ_count(), 100.0 * fg);
            let labeled = i == 0;
            if !labeled {
                v = v.without_labels();
            }
            let path = format!("{}_{i}.vol", region.to_string().to_lowercase());
            write_volume(&v, dir.path().join(&path)).unwrap();
            records.push(ManifestRecord { path, region_tag: region, labeled, split: Split::Train });
        }
    }
    let manifest = dir.path().join("manifest.jsonl");
    write_manifest(&records, &manifest).unwrap();
    let back = Dataset::load(&manifest).unwrap();
    println!("reloaded {} volumes, {} labeled, regions {:?}", back.len(), back.labeled().len(), back.regions());
}

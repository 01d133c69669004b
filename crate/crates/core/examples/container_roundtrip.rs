//! Write named arrays to the container format and read them back.

use mtcr_vc::datakit::container::{read_container, write_container_as, ElementType};
use ndarray::{array, ArrayD, IxDyn};

fn main() -> mtcr_vc::Result<()> {
    let arrays = vec![
        (
            "weights".to_string(),
            array![[0.1, -2.5], [3.0, 1e-9]].into_dyn(),
        ),
        (
            "cube".to_string(),
            ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |i| (i[0] * 12 + i[1] * 4 + i[2]) as f64),
        ),
    ];
    let dir = std::env::temp_dir();
    for et in [ElementType::F64, ElementType::F32] {
        let path = dir.join(format!("mtcr-roundtrip-{et:?}.mtcr"));
        write_container_as(&path, &arrays, &serde_json::json!({"note": "example"}), et)?;
        let back = read_container(&path)?;
        let exact = back.arrays == arrays;
        println!(
            "{et:?}: {} bytes, entries {:?}, exact {exact}",
            std::fs::metadata(&path)?.len(),
            back.entries
                .iter()
                .map(|e| (&e.name, &e.shape, e.byte_offset))
                .collect::<Vec<_>>()
        );
    }
    Ok(())
}

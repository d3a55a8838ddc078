//! Attention paths: enumeration order, labels, and the block-diagonal lift
//! of a lower-level order parameter.

use apk::paths::{enumerate_paths, extend_order_parameter, paths_through_head};
use nalgebra::DMatrix;

fn main() -> apk::Result<()> {
    let (h, l) = (2, 3);
    let paths = enumerate_paths(h, l)?;
    for (k, p) in paths.iter().enumerate() {
        println!("flat {k}: {}", p.label());
    }
    let through = paths_through_head(2, 1, &paths, h, l)?;
    let labels: Vec<String> = through.iter().map(|p| p.label()).collect();
    println!("through layer 2 head 2: {}", labels.join(" "));
    let u = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    println!("lift of U into I_H (x) U: {}", extend_order_parameter(&u, h)?);
    Ok(())
}

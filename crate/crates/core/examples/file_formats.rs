//! Write and read back every binary artifact, then check the digests.

use apk::config::RunConfig;
use apk::data::{build_hmc_heads, gen_hmc_dataset, HmcTaskConfig};
use apk::io;
use apk::kernel::{compute_features, total_kernel};
use apk::model::ReadoutMode;
use apk::solver::OrderParameterSet;

fn main() -> apk::Result<()> {
    let dir = std::env::temp_dir().join("apk_file_formats");
    std::fs::create_dir_all(&dir).map_err(|e| apk::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let digest = RunConfig::default().resolve()?.digest()?;
    let cfg = HmcTaskConfig {
        train_count: 10,
        test_count: 10,
        ..Default::default()
    };
    let split = gen_hmc_dataset(&cfg)?;
    let heads = build_hmc_heads(&cfg, 1000)?;
    let f = compute_features(&split.train.examples, &heads, ReadoutMode::SingleToken(1), false)?;
    let u = OrderParameterSet::gp_point(2, 2, 1.0)?;
    let k = total_kernel(u.u1(), &f)?;
    io::write_dataset(&dir.join("train.apkd"), &split.train, &digest)?;
    io::write_attention_spec(&dir.join("heads.apkw"), &heads, &digest)?;
    io::write_features(&dir.join("features.apkf"), &f, &digest)?;
    io::write_kernel(&dir.join("kernel.apkk"), &k, &digest)?;
    io::write_order_parameters(&dir.join("u.apku"), &u, &digest)?;
    io::write_path_matrix_csv(&dir.join("u1.csv"), u.u1(), f.paths(), &digest)?;
    assert_eq!(io::read_dataset(&dir.join("train.apkd"))?.0, split.train);
    assert_eq!(io::read_features(&dir.join("features.apkf"))?.0.stack(), f.stack());
    assert_eq!(io::read_kernel(&dir.join("kernel.apkk"))?.0.values, k.values);
    assert_eq!(io::read_order_parameters(&dir.join("u.apku"))?.0, u);
    let _ = io::read_attention_spec(&dir.join("heads.apkw"))?;
    for name in ["train.apkd", "heads.apkw", "features.apkf", "kernel.apkk", "u.apku", "u1.csv"] {
        let d = io::read_digest(&dir.join(name))?;
        println!("{name}: digest matches {}", d == digest);
    }
    println!("artifacts in {}", dir.display());
    Ok(())
}

//! Shared fixtures for the criterion benches.

use geoflow_core::phantom::{generate_phantom, PhantomBundle, PhantomParams};
use geoflow_core::{MaskVolume, ScalarVolume, VolumeGeometry};

/// Reduced phantom, small enough that a stage runs in well under a second.
pub fn small_phantom() -> PhantomBundle {
    generate_phantom(&PhantomParams {
        dims: [64, 64, 8],
        fov_mm: [200.0, 156.0, 40.0],
        ..PhantomParams::default()
    })
    .expect("phantom parameters are valid")
}

/// Smoothly varying positive speed on an `n³` grid with a single centre source.
pub fn sweep_problem(n: usize) -> (MaskVolume, ScalarVolume) {
    let g = VolumeGeometry::new([n, n, n], [n as f64; 3]).expect("valid grid");
    let f = ScalarVolume::from_fn(g, |x, y, z| {
        1.0 + 0.5 * ((x as f64 * 0.3).sin() * (y as f64 * 0.2).cos() + z as f64 / n as f64)
    });
    let mut src = MaskVolume::empty(g);
    src.data_mut()[g.index(n / 2, n / 2, n / 2)] = true;
    (src, f)
}

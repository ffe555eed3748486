//! Singular-value entropy and effective rank on matrices with known answers.

use collapse_lab::linalg::{singular_spectrum, Matrix};
use collapse_lab::metrics::spectral_summary;
use collapse_lab::AttnMatrix;

fn block_uniform(n: usize, blocks: usize) -> Matrix {
    let size = n / blocks;
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i / size == j / size {
                m.set(i, j, 1.0 / size as f64);
            }
        }
    }
    m
}

fn main() -> collapse_lab::Result<()> {
    let n = 12;
    let cases = [
        ("uniform", AttnMatrix::uniform(n)),
        ("identity", AttnMatrix::new(Matrix::identity(n))?),
        ("3 blocks", AttnMatrix::new(block_uniform(n, 3))?),
        ("4 blocks", AttnMatrix::new(block_uniform(n, 4))?),
    ];
    for (name, a) in &cases {
        let s = spectral_summary(a)?;
        println!(
            "{name:<9} entropy {:.6}  effective rank {:.6}  top singular value {:.4}",
            s.entropy_normalized, s.effective_rank, s.spectrum.values[0]
        );
    }
    let rect = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 4.0], vec![0.0, 0.0]])?;
    println!("singular values of a 3x2 matrix: {:?}", singular_spectrum(&rect)?.values);
    Ok(())
}

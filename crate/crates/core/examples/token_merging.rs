//! One bipartite merge of a clustered token set: cluster sizes, the realized
//! down-sampling factor, and protected or salient tokens kept as singletons.

use collapse_lab::merging::cluster_means;
use collapse_lab::{apply_merge, apply_unmerge, build_merge_map, effective_downsampling, init_tokens, select_salient};
use collapse_lab::{InitDistribution, MergeConfig};

fn main() -> collapse_lab::Result<()> {
    let x = init_tokens(40, 8, InitDistribution::GaussianClusters { k: 4, spread: 0.2 }, 7)?;

    for m in [0.1, 0.5, 0.9] {
        let map = build_merge_map(&x, &MergeConfig::with_fusion(m))?;
        let largest = map.cluster_sizes().iter().max().copied().unwrap_or(0);
        println!(
            "m = {m}: {} -> {} tokens, d = {:.3} (nominal {:.3}), largest cluster {largest}",
            map.n_src(),
            map.n_dst(),
            effective_downsampling(&map),
            1.0 / (1.0 - m)
        );
    }

    let salient = select_salient(&x, 0.1);
    let cfg = MergeConfig {
        fusion_m: 0.5,
        protected_indices: [0, 1].into_iter().collect(),
        salient_fraction: 0.1,
        ..Default::default()
    };
    let map = build_merge_map(&x, &cfg)?;
    let singles: Vec<usize> = map.clusters().into_iter().filter(|c| c.len() == 1).map(|c| c[0]).collect();
    println!("salient tokens {salient:?}; singletons after merge {singles:?}");

    let merged = apply_merge(&x, &map)?;
    let back = apply_unmerge(&merged, &map)?;
    let means = cluster_means(x.tokens(), &map)?;
    println!(
        "merged {} rows, unmerged {} rows, raw cluster means {}x{}",
        merged.n(),
        back.n(),
        means.rows(),
        means.cols()
    );
    Ok(())
}

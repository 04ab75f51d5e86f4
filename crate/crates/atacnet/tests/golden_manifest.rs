//! Golden-file check of the graph text manifest.

use atacnet::graph::{build_resnet20v2, ReplacementPolicy};
use atacnet::nn::ActivationKind;

#[test]
fn resnet20v2_b1_manifest_matches_golden() {
    let graph = build_resnet20v2(1, 10, ActivationKind::Relu).unwrap();
    let golden = include_str!("golden/resnet20v2_b1.manifest");
    assert_eq!(graph.manifest(), golden);

    // the fully-attentional rewrite touches exactly the activation lines
    let atac = graph.apply_replacement(&ReplacementPolicy::Ratio(1.0), 2).unwrap();
    let rewritten = atac.manifest();
    let changed: Vec<(&str, &str)> = golden
        .lines()
        .zip(rewritten.lines())
        .filter(|(a, b)| a != b)
        .collect();
    assert_eq!(changed.len(), 7);
    for (before, after) in changed {
        assert!(before.contains("kind=relu"), "{before}");
        assert!(after.contains("kind=atac(r=2)"), "{after}");
    }
}

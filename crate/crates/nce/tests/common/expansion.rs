//! Expansion mechanics checks shared by the expansion test target and
//! the acceptance suite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nce::arch::preset;
use nce::searchspace::ExpansionDecision;
use nce::supernet::{QuantSetting, SearchConv, SuperNet};
use nce::tensor::Tensor;

const THRESHOLD: f32 = 0.3;

fn build_net(seed: u64) -> SuperNet {
    let arch = preset("resnet8").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SuperNet::searchable(&arch, QuantSetting::full_precision(), 8, 16, &[], &mut rng).unwrap()
}

/// Set the last alpha of group `g` so the max candidate's softmax mass
/// lands at `mass` (all other alphas stay 0).
fn force_mass(net: &mut SuperNet, g: usize, mass: f32) {
    let n = net.groups[g].len();
    let alpha = net.groups[g].alpha;
    let data = &mut net.params.get_mut(alpha).value.data;
    for v in data.iter_mut() {
        *v = 0.0;
    }
    data[n - 1] = ((mass / (1.0 - mass)) * (n - 1) as f32).ln();
}

fn convs_of(net: &SuperNet) -> Vec<&SearchConv> {
    let mut out = Vec::new();
    for stage in &net.stages {
        for block in &stage.blocks {
            out.push(&block.conv1);
            out.push(&block.conv2);
            if let Some(sc) = &block.shortcut {
                out.push(sc);
            }
        }
    }
    out
}

pub fn fires_only_at_or_above_threshold() {
    let mut net = build_net(0);
    let g = net.groups.iter().position(|s| s.searchable).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    force_mass(&mut net, g, THRESHOLD - 0.01);
    let before = net.groups[g].len();
    let (expanded, _) = net.expand_all_due(THRESHOLD, &mut rng);
    assert!(!expanded.contains(&g));
    assert_eq!(net.groups[g].len(), before);

    force_mass(&mut net, g, THRESHOLD + 0.01);
    let (expanded, _) = net.expand_all_due(THRESHOLD, &mut rng);
    assert!(expanded.contains(&g));
    assert_eq!(net.groups[g].len(), before + 1);
}

pub fn copied_alpha_gives_equal_softmax_mass() {
    let mut net = build_net(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for g in 0..net.groups.len() {
        if !net.groups[g].searchable {
            continue;
        }
        // non-trivial alpha pattern before the trigger
        let alpha = net.groups[g].alpha;
        for (i, v) in net.params.get_mut(alpha).value.data.iter_mut().enumerate() {
            *v = (i as f32 * 0.37).sin();
        }
        force_mass(&mut net, g, 0.5);
        assert!(net.expand_group(g, &mut rng));
        let sm = net.groups[g].softmax(&net.params);
        let n = sm.len();
        assert!(
            (sm[n - 1] - sm[n - 2]).abs() <= 1e-6,
            "group {g}: copied candidate mass {} vs source {}",
            sm[n - 1],
            sm[n - 2]
        );
    }
}

pub fn pre_existing_weight_slices_bit_identical() {
    let mut net = build_net(4);
    let g = net
        .groups
        .iter()
        .enumerate()
        .filter(|(_, s)| s.searchable)
        .map(|(i, _)| i)
        .nth(1)
        .unwrap();

    // snapshot every weight bank touching the group, with its extents
    let touched: Vec<(usize, usize, Tensor)> = convs_of(&net)
        .into_iter()
        .filter(|c| c.out_group == g || c.in_group == Some(g))
        .map(|c| (c.out_max, c.in_max, net.params.get(c.weight).value.clone()))
        .collect();
    assert!(!touched.is_empty());
    let before_ids: Vec<_> = convs_of(&net)
        .into_iter()
        .filter(|c| c.out_group == g || c.in_group == Some(g))
        .map(|c| (c.id.clone(), c.weight))
        .collect();

    force_mass(&mut net, g, 0.9);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    assert!(net.expand_group(g, &mut rng));

    for ((old_out, old_in, old_w), (id, wid)) in touched.iter().zip(&before_ids) {
        let new_w = &net.params.get(*wid).value;
        let k = old_w.shape[2] * old_w.shape[3];
        let (new_in,) = (new_w.shape[1],);
        for o in 0..*old_out {
            for i in 0..*old_in {
                for p in 0..k {
                    let old_v = old_w.data[(o * old_in + i) * k + p];
                    let new_v = new_w.data[(o * new_in + i) * k + p];
                    assert_eq!(
                        old_v.to_bits(),
                        new_v.to_bits(),
                        "{id}: slice [{o},{i},{p}] changed across expansion"
                    );
                }
            }
        }
    }
}

pub fn candidate_count_never_exceeds_cap() {
    let mut net = build_net(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // force every searchable group over threshold each round; run far more
    // rounds than the cap leaves room for
    for _ in 0..40 {
        for g in 0..net.groups.len() {
            if net.groups[g].searchable {
                force_mass(&mut net, g, 0.9);
            }
        }
        net.expand_all_due(THRESHOLD, &mut rng);
        for s in &net.groups {
            assert!(s.len() <= 16, "candidate set grew past the cap: {}", s.len());
        }
    }
    // every searchable group ends saturated and reports it
    for (i, s) in net.groups.iter().enumerate() {
        if s.searchable {
            assert_eq!(s.len(), 16);
            assert_eq!(s.expansion_due(&net.params, THRESHOLD), ExpansionDecision::Saturated, "group {i}");
        }
    }
}

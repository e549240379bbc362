//! Tile masks expanded bit-by-bit must reproduce the brute-force token
//! oracle for every layout and rule combination, including awkward tile
//! sizes that straddle segment and window boundaries.

use mosaic_core::layout::{build_layout, AnchorSpec, GridSpec, TokenLayout, WindowSpec};
use mosaic_core::mask::{
    build_block_mask, build_token_mask, build_token_mask_capped, tile_stats, verify_block_mask,
    GuidanceScope, InteractionRules, LrSelfScope, DEFAULT_K_TILE, DEFAULT_Q_TILE,
};
use proptest::prelude::*;

fn guided(side: u32, window: u32, halo: u32, ratio: u32, text_len: usize) -> TokenLayout {
    let grid = GridSpec::new(side, side, 1).unwrap();
    let window = WindowSpec::new(window, halo).unwrap();
    let anchor = AnchorSpec::new(side / ratio, side / ratio, ratio).unwrap();
    build_layout(&grid, &window, Some(&anchor), text_len).unwrap()
}

fn x_only(side: u32, window: u32, halo: u32, text_len: usize) -> TokenLayout {
    let grid = GridSpec::new(side, side, 1).unwrap();
    let window = WindowSpec::new(window, halo).unwrap();
    build_layout(&grid, &window, None, text_len).unwrap()
}

fn check_all_tilings(layout: &TokenLayout, rules: &InteractionRules) {
    let token = build_token_mask(layout, rules).unwrap();
    for (qt, kt) in [(1, 1), (5, 3), (16, 16), (DEFAULT_Q_TILE, DEFAULT_K_TILE)] {
        let block = build_block_mask(layout, rules, qt, kt).unwrap();
        let report = verify_block_mask(&block, &token).unwrap();
        assert!(
            report.passed(),
            "tiles {qt}x{kt}: {} discrepancies, first {:?}",
            report.discrepancies,
            report.first_mismatch
        );
        assert_eq!(tile_stats(&block).allowed_bits, token.allowed_bits());
    }
}

#[test]
fn default_rules_across_layout_shapes() {
    let rules = InteractionRules::default();
    check_all_tilings(&x_only(4, 2, 1, 2), &rules);
    check_all_tilings(&guided(8, 4, 1, 2, 3), &rules);
    check_all_tilings(&guided(16, 4, 2, 4, 5), &rules);
    check_all_tilings(&x_only(16, 8, 3, 0), &rules);
}

#[test]
fn scope_variants_and_rectangles() {
    let mut all = InteractionRules::default();
    all.x_to_lr = GuidanceScope::All;
    all.text_to_lr = true;
    check_all_tilings(&guided(8, 4, 1, 2, 2), &all);

    let mut local = InteractionRules::linear_scaling();
    local.lr_to_text = false;
    check_all_tilings(&guided(16, 4, 1, 2, 1), &local);

    let grid = GridSpec::new(8, 16, 1).unwrap();
    let window = WindowSpec::new(4, 2).unwrap();
    let layout = build_layout(&grid, &window, None, 4).unwrap();
    check_all_tilings(&layout, &InteractionRules::default());
}

#[test]
fn full_default_config_at_oracle_scale() {
    // The standard guided configuration: 64x64 image grid, window 16,
    // halo 2, 16x16 anchors at ratio 4, 7 text tokens (S = 4359).
    let layout = guided(64, 16, 2, 4, 7);
    let rules = InteractionRules::default();
    let token = build_token_mask(&layout, &rules).unwrap();
    let block = build_block_mask(&layout, &rules, DEFAULT_Q_TILE, DEFAULT_K_TILE).unwrap();
    assert!(verify_block_mask(&block, &token).unwrap().passed());
}

#[test]
fn consistency_at_the_oracle_cap() {
    // 128x128 image grid is exactly the 16384-row cap.
    let layout = x_only(128, 16, 2, 0);
    let rules = InteractionRules::default();
    let token = build_token_mask_capped(&layout, &rules, 16384).unwrap();
    let block = build_block_mask(&layout, &rules, DEFAULT_Q_TILE, DEFAULT_K_TILE).unwrap();
    let report = verify_block_mask(&block, &token).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn allowed_bits_grow_linearly() {
    // Quadrupling token count multiplies allowed bits by ~4 when every rule
    // has a bounded key budget: halo 0 and window-scoped guidance self
    // attention (global guidance self grows quadratically by design).
    let mut bits = Vec::new();
    for side in [32u32, 64, 128] {
        let layout = guided(side, 16, 0, 4, 0);
        let mut rules = InteractionRules::linear_scaling();
        rules.x_neighbor_halo = false;
        let block = build_block_mask(&layout, &rules, DEFAULT_Q_TILE, DEFAULT_K_TILE).unwrap();
        bits.push(tile_stats(&block).allowed_bits as f64);
    }
    for pair in bits.windows(2) {
        let ratio = pair[1] / pair[0];
        assert!((3.8..=4.3).contains(&ratio), "ratio {ratio}");
    }
}

#[test]
fn block_mask_storage_dominates_dense_bits() {
    let layout = x_only(256, 16, 0, 0);
    let mut rules = InteractionRules::default();
    rules.x_neighbor_halo = false;
    let block = build_block_mask(&layout, &rules, DEFAULT_Q_TILE, DEFAULT_K_TILE).unwrap();
    let stats = tile_stats(&block);
    assert_eq!(stats.payload_bytes, 0, "aligned windows need no payloads");
    assert!(stats.dense_bits_bytes >= 4096 * stats.analytic_bytes);
}

fn arb_rules() -> impl Strategy<Value = InteractionRules> {
    (
        any::<[bool; 6]>(),
        0u8..3,
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(|(flags, scope, lr_text, lr_global)| InteractionRules {
            text_to_text: flags[0],
            text_to_x: flags[1],
            text_to_lr: flags[2],
            x_to_text: flags[3],
            x_local: flags[4],
            x_neighbor_halo: flags[5],
            x_to_lr: match scope {
                0 => GuidanceScope::Off,
                1 => GuidanceScope::Region,
                _ => GuidanceScope::All,
            },
            lr_to_text: lr_text,
            lr_self_scope: if lr_global {
                LrSelfScope::Global
            } else {
                LrSelfScope::LocalWindow
            },
        })
}

/// Widens a rule set: every flag stays on or turns on, scopes only grow.
fn widen(r: &InteractionRules, extra: &InteractionRules) -> InteractionRules {
    InteractionRules {
        text_to_text: r.text_to_text || extra.text_to_text,
        text_to_x: r.text_to_x || extra.text_to_x,
        text_to_lr: r.text_to_lr || extra.text_to_lr,
        x_to_text: r.x_to_text || extra.x_to_text,
        x_local: r.x_local || extra.x_local,
        x_neighbor_halo: r.x_neighbor_halo || extra.x_neighbor_halo,
        x_to_lr: match (r.x_to_lr, extra.x_to_lr) {
            (GuidanceScope::All, _) | (_, GuidanceScope::All) => GuidanceScope::All,
            (GuidanceScope::Region, _) | (_, GuidanceScope::Region) => GuidanceScope::Region,
            _ => GuidanceScope::Off,
        },
        lr_to_text: r.lr_to_text || extra.lr_to_text,
        lr_self_scope: match (r.lr_self_scope, extra.lr_self_scope) {
            (LrSelfScope::Global, _) | (_, LrSelfScope::Global) => LrSelfScope::Global,
            _ => LrSelfScope::LocalWindow,
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn enabling_rules_never_clears_bits(base in arb_rules(), extra in arb_rules()) {
        let layout = guided(8, 4, 1, 2, 3);
        let wide = widen(&base, &extra);
        let narrow = build_token_mask(&layout, &base).unwrap();
        let wide_mask = build_token_mask(&layout, &wide).unwrap();
        let s = layout.seq_len();
        for q in 0..s {
            for (a, b) in narrow.row_words(q).iter().zip(wide_mask.row_words(q)) {
                prop_assert_eq!(a & !b, 0, "row {} lost bits", q);
            }
        }
    }

    #[test]
    fn random_rules_tile_consistency(rules in arb_rules(), qt in 1usize..20, kt in 1usize..20) {
        let layout = guided(8, 4, 1, 2, 3);
        let token = build_token_mask(&layout, &rules).unwrap();
        let block = build_block_mask(&layout, &rules, qt, kt).unwrap();
        let report = verify_block_mask(&block, &token).unwrap();
        prop_assert!(report.passed(), "{:?}", report);
    }
}

//! Property: the flat config codec loses nothing — parsing a serialized
//! configuration reproduces it exactly, for arbitrary field values (validity
//! is a separate concern checked by `validate`).

use mosaic_cli::config::{GuidanceOpt, LrSelfOpt, Precision, RunConfig, TrainModeOpt};
use proptest::prelude::*;

fn arb_precision() -> impl Strategy<Value = Precision> {
    prop_oneof![Just(Precision::F32), Just(Precision::F64)]
}

fn arb_guidance() -> impl Strategy<Value = GuidanceOpt> {
    prop_oneof![Just(GuidanceOpt::Region), Just(GuidanceOpt::All), Just(GuidanceOpt::Off)]
}

fn arb_lr_self() -> impl Strategy<Value = LrSelfOpt> {
    prop_oneof![Just(LrSelfOpt::Global), Just(LrSelfOpt::Local)]
}

fn arb_train_mode() -> impl Strategy<Value = TrainModeOpt> {
    prop_oneof![Just(TrainModeOpt::Lora), Just(TrainModeOpt::Full)]
}

prop_compose! {
    fn arb_config()(
        geo in (
            any::<u32>(),                                   // grid_side
            prop::collection::vec(any::<u32>(), 0..5),      // sweep
            any::<u32>(),                                   // window
            any::<u32>(),                                   // halo
            any::<u32>(),                                   // rho
            any::<u32>(),                                   // lr_side
        ),
        sizes in (
            any::<usize>(),                                 // text_len
            any::<usize>(),                                 // q_tile
            any::<usize>(),                                 // k_tile
            any::<usize>(),                                 // head_dim
        ),
        runner in (
            arb_precision(),
            any::<u64>(),                                   // seed
            any::<usize>(),                                 // repetitions
            // no '#', '=', newlines, or edge whitespace — the line format's
            // only reserved characters
            "[A-Za-z0-9_./-]{0,24}",                        // output
        ),
        rules in (arb_guidance(), arb_lr_self()),
        training in (
            any::<usize>(),                                 // steps
            -1.0e300f64..1.0e300,                           // learning_rate
            arb_train_mode(),
            any::<usize>(),                                 // lora_rank
            any::<usize>(),                                 // channels
        ),
        sampling in (
            any::<usize>(),                                 // sample_steps
            any::<u32>(),                                   // levels
            any::<u32>(),                                   // base_side
        ),
    ) -> RunConfig {
        RunConfig {
            grid_side: geo.0,
            sweep: geo.1,
            window: geo.2,
            halo: geo.3,
            rho: geo.4,
            lr_side: geo.5,
            text_len: sizes.0,
            q_tile: sizes.1,
            k_tile: sizes.2,
            head_dim: sizes.3,
            precision: runner.0,
            seed: runner.1,
            repetitions: runner.2,
            output: runner.3,
            guidance: rules.0,
            lr_self: rules.1,
            steps: training.0,
            learning_rate: training.1,
            train_mode: training.2,
            lora_rank: training.3,
            channels: training.4,
            sample_steps: sampling.0,
            levels: sampling.1,
            base_side: sampling.2,
        }
    }
}

proptest! {
    #[test]
    fn serialize_then_parse_is_identity(cfg in arb_config()) {
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).expect("serialized config parses");
        prop_assert_eq!(back, cfg);
    }
}

//! Closed-form compute model against independently recomputed values.

use hire_core::costmodel::*;
use hire_core::enricher::EnricherConfig;
use hire_core::unet::UNetConfig;
use proptest::prelude::*;

// Recomputed outside the crate from the per-layer formulas.
const VIT_L_336: u64 = 190_959_108_096;
const LLM_7B_577: u64 = 3_824_061_513_728;
const LLM_7B_1: u64 = 6_607_339_520;
const ENRICHER_672: u64 = 39_305_109_312;
const ENRICHER_1008: u64 = 88_436_495_952;
const UNET_672: u64 = 8_343_465_984;

fn cost(kind: PipelineKind, res: u64) -> CostReport {
    pipeline_cost(&PipelineSpec::new(kind, res, ViTSpec::large(336))).unwrap()
}

#[test]
fn component_oracles() {
    assert_eq!(vit_macs(&ViTSpec::large(336)), VIT_L_336);
    assert_eq!(llm_prefill_macs(&LLMSpec::default()), LLM_7B_577);
    let one = LLMSpec {
        n_tokens: 1,
        ..LLMSpec::default()
    };
    // one token: per-token layer cost, a 1×1 attention term and the head
    assert_eq!(llm_prefill_macs(&one), 32 * (4 * 4096 * 4096 + 3 * 4096 * 11008 + 2 * 4096) + 4096 * 32000);
    assert_eq!(llm_prefill_macs(&one), LLM_7B_1);
    let spec = EnricherCostSpec::default();
    assert_eq!(enricher_macs(672, &spec).unwrap(), ENRICHER_672);
    assert_eq!(enricher_macs(1008, &spec).unwrap(), ENRICHER_1008);
    let unet: u64 = spec.enricher.unet.layers().iter().map(|l| l.macs(672)).sum();
    assert_eq!(unet, UNET_672);
}

#[test]
fn magnitudes() {
    let v = vit_macs(&ViTSpec::large(336)) as f64;
    assert!((v / 1.91e11 - 1.0).abs() < 0.01);
    let l = llm_prefill_macs(&LLMSpec::default()) as f64;
    assert!((l / 3.8e12 - 1.0).abs() < 0.01);
}

#[test]
fn doubling_depth_doubles_the_transformer_term() {
    let base = ViTSpec::large(336);
    let embed = vit_macs(&ViTSpec { depth: 0, ..base.clone() });
    let deep = ViTSpec { depth: 48, ..base.clone() };
    assert_eq!(vit_macs(&deep) - embed, 2 * (vit_macs(&base) - embed));
}

#[test]
fn enricher_scales_with_area() {
    let spec = EnricherCostSpec::default();
    let r = enricher_macs(1008, &spec).unwrap() as f64 / enricher_macs(672, &spec).unwrap() as f64;
    assert!((r / 2.25 - 1.0).abs() < 0.15, "{r}");
}

#[test]
fn zero_width_unet_leaves_only_the_stack() {
    let spec = EnricherCostSpec {
        enricher: EnricherConfig {
            unet: UNetConfig {
                encoder_widths: [0; 5],
                ..UNetConfig::default()
            },
            ..EnricherConfig::default()
        },
        channels: 1024,
    };
    let stack: u64 = [42u64, 84, 168, 336, 672]
        .iter()
        .map(|&s| s * s * (16 * 32 + 49 * (16 + 1024)))
        .sum();
    assert_eq!(enricher_macs(672, &spec).unwrap(), stack);
    assert_eq!(stack, ENRICHER_672 - UNET_672);
}

#[test]
fn reports_sum_their_components() {
    for (kind, res) in [(PipelineKind::Vanilla, 336), (PipelineKind::S2, 1008), (PipelineKind::Hire, 672)] {
        let r = cost(kind, res);
        assert_eq!(r.total_macs, r.vit_macs + r.enricher_macs + r.projector_macs + r.llm_macs);
    }
}

#[test]
fn inconsistent_specs_are_rejected() {
    let vit = ViTSpec::large(336);
    assert!(pipeline_cost(&PipelineSpec::new(PipelineKind::Vanilla, 672, vit.clone())).is_err());
    assert!(pipeline_cost(&PipelineSpec::new(PipelineKind::S2, 700, vit.clone())).is_err());
    assert!(pipeline_cost(&PipelineSpec::new(PipelineKind::Hire, 680, vit.clone())).is_err());
    assert!(pipeline_cost(&PipelineSpec::new(PipelineKind::Hire, 224, vit)).is_err());
    assert!(ViTSpec::by_name("X", 336).is_err());
}

#[test]
fn degenerate_multi_crop_equals_vanilla() {
    let v = cost(PipelineKind::Vanilla, 336);
    let s = cost(PipelineKind::S2, 336);
    assert_eq!(v.total_macs, s.total_macs);
}

#[test]
fn table2_and_headline_ratios() {
    let rows = reproduce_table2(&PipelineSpec::new(PipelineKind::Vanilla, 672, ViTSpec::large(336))).unwrap();
    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert!(r.rel_error < 0.10, "{r:?}");
    }
    let s2 = cost(PipelineKind::S2, 1008);
    let hire = cost(PipelineKind::Hire, 1008);
    let ratio = s2.ratio_to(&hire);
    assert!((1.39..=1.69).contains(&ratio), "{ratio}");
    let red = hire.reduction_vs(&s2);
    assert!((0.30..=0.40).contains(&red), "{red}");
    let vanilla = cost(PipelineKind::Vanilla, 336);
    assert!((ENRICHER_672 as f64) / (vanilla.total_macs as f64) < 0.01);
}

#[test]
fn scaling_sweep_overheads() {
    let template = PipelineSpec::new(PipelineKind::Hire, 672, ViTSpec::large(336));
    let kinds = [PipelineKind::Vanilla, PipelineKind::S2, PipelineKind::Hire];
    let vits = sweep_vits();
    let reports = scaling_sweep(&vits, &kinds, &template).unwrap();
    assert_eq!(reports.len(), 18);
    let mut hire_overheads = Vec::new();
    let mut s2 = Vec::new();
    for (i, vit) in vits.iter().enumerate() {
        let [van, s, h] = [&reports[3 * i], &reports[3 * i + 1], &reports[3 * i + 2]];
        hire_overheads.push(h.overhead_over(van));
        s2.push((vit_macs(vit), s.overhead_over(van)));
    }
    assert!(hire_overheads.windows(2).all(|w| w[0] == w[1]), "{hire_overheads:?}");
    s2.sort();
    assert!(s2.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1), "{s2:?}");
    assert!(scaling_sweep(&vits, &[], &template).unwrap().is_empty());
}

#[test]
fn csv_and_json_agree() {
    let template = PipelineSpec::new(PipelineKind::Hire, 672, ViTSpec::large(336));
    let reports = scaling_sweep(&sweep_vits(), &[PipelineKind::Vanilla, PipelineKind::S2, PipelineKind::Hire], &template).unwrap();
    let mut buf = Vec::new();
    write_csv(&reports, &mut buf).unwrap();
    let header = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(header.lines().next().unwrap(), CSV_COLUMNS.join(","));
    let from_csv = read_csv(&buf[..]).unwrap();
    let from_json: Vec<CostRow> = serde_json::from_str(&to_json(&reports).unwrap()).unwrap();
    assert_eq!(from_csv, from_json);
    for (row, r) in from_csv.iter().zip(&reports) {
        assert_eq!(row.total_tmacs, r.total_tmacs());
    }

    let mut empty = Vec::new();
    write_csv(&[], &mut empty).unwrap();
    assert_eq!(String::from_utf8(empty).unwrap().trim(), CSV_COLUMNS.join(","));
}

proptest! {
    #[test]
    fn enriched_sits_between_vanilla_and_multi_crop(
        size in 0usize..3,
        base in prop::sample::select(vec![224u64, 336]),
        k in 2u64..5,
    ) {
        let vit = [ViTSpec::large(base), ViTSpec::huge(base), ViTSpec::giant(base)][size].clone();
        let res = base * k;
        let van = pipeline_cost(&PipelineSpec::new(PipelineKind::Vanilla, base, vit.clone())).unwrap();
        let hire = pipeline_cost(&PipelineSpec::new(PipelineKind::Hire, res, vit.clone())).unwrap();
        let s2 = pipeline_cost(&PipelineSpec::new(PipelineKind::S2, res, vit)).unwrap();
        prop_assert!(van.total_macs < hire.total_macs);
        prop_assert!(hire.total_macs < s2.total_macs);
    }

    #[test]
    fn prefill_grows_with_tokens(n in 1u64..4000) {
        let a = LLMSpec { n_tokens: n, ..LLMSpec::default() };
        let b = LLMSpec { n_tokens: n + 1, ..LLMSpec::default() };
        prop_assert!(llm_prefill_macs(&a) < llm_prefill_macs(&b));
    }
}

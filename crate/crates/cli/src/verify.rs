use std::collections::BTreeSet;
use std::path::Path;

use anyhow::Context;
use moeits_core::builder::{HEALING_FILE_NAME, PLAN_FILE_NAME};
use moeits_core::sim::{probe_inputs, ToyModel};
use moeits_core::{
    adjust_config, count_params, emit_healing_manifest, open_checkpoint, open_checkpoint_as,
    resolve_expert_blocks, sha256_hex, slice_router, Architecture, HealingManifest, ModelManifest,
    PruningPlan,
};
use serde::{Deserialize, Serialize};

use crate::report::predicted_counts;

pub const VERIFY_FILE_NAME: &str = "verify.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<Check>,
}

type CheckResult = anyhow::Result<String>;

fn fail(msg: String) -> CheckResult {
    Err(anyhow::anyhow!(msg))
}

struct Ctx<'a> {
    src: &'a ModelManifest,
    out: &'a ModelManifest,
    plan: &'a PruningPlan,
    plan_bytes: &'a [u8],
    healing: &'a HealingManifest,
}

fn provenance(c: &Ctx) -> CheckResult {
    let plan_hash = sha256_hex(c.plan_bytes);
    if plan_hash != c.healing.provenance.plan_hash {
        return fail(format!(
            "plan hash {plan_hash} does not match healing manifest {}",
            c.healing.provenance.plan_hash
        ));
    }
    let source_hash = c.src.source_hash()?;
    if c.plan.source_hash != source_hash || c.healing.provenance.source_hash != source_hash {
        return fail(format!(
            "source checkpoint hash {source_hash} differs from the plan's {}",
            c.plan.source_hash
        ));
    }
    Ok(format!("plan {plan_hash}"))
}

fn router_shapes(c: &Ctx) -> CheckResult {
    let src_blocks = resolve_expert_blocks(c.src)?;
    let out_blocks = resolve_expert_blocks(c.out)?;
    if src_blocks.len() != out_blocks.len() {
        return fail(format!("{} MoE blocks, expected {}", out_blocks.len(), src_blocks.len()));
    }
    for (s, o) in src_blocks.iter().zip(&out_blocks) {
        let kept = c.plan.layer(s.layer_index).context("plan lacks a layer")?.kept.len();
        if o.num_experts() != kept || o.router_shape != [kept, s.router_shape[1]] {
            return fail(format!(
                "layer {}: {} experts and router {:?}, expected {kept} and [{kept}, {}]",
                s.layer_index,
                o.num_experts(),
                o.router_shape,
                s.router_shape[1]
            ));
        }
        let src_router = c.src.load_bytes(&s.router_tensor_name)?;
        let row_bytes = src_router.len() / s.router_shape[0];
        let l = c.plan.layer(s.layer_index).context("plan lacks a layer")?;
        let expected = slice_router(&src_router, [s.router_shape[0], row_bytes], &l.kept)?;
        if c.out.load_bytes(&o.router_tensor_name)? != expected {
            return fail(format!("layer {}: router rows differ from the kept source rows", s.layer_index));
        }
    }
    Ok(format!("{} routers sliced", out_blocks.len()))
}

fn expert_bytes(c: &Ctx) -> CheckResult {
    let src_blocks = resolve_expert_blocks(c.src)?;
    let out_blocks = resolve_expert_blocks(c.out)?;
    let mut n = 0;
    for (s, o) in src_blocks.iter().zip(&out_blocks) {
        let l = c.plan.layer(s.layer_index).context("plan lacks a layer")?;
        for (new, &old) in l.kept.iter().enumerate() {
            for (a, b) in s.expert_tensor_names[old].iter().zip(&o.expert_tensor_names[new]) {
                if c.src.load_bytes(a)? != c.out.load_bytes(b)? {
                    return fail(format!("{b} does not match source {a}"));
                }
                n += 1;
            }
        }
    }
    Ok(format!("{n} expert tensors match their source"))
}

fn untouched_bytes(c: &Ctx) -> CheckResult {
    let blocks = resolve_expert_blocks(c.src)?;
    let block_names: BTreeSet<&str> = blocks
        .iter()
        .flat_map(|b| {
            b.expert_tensor_names
                .iter()
                .flatten()
                .chain(std::iter::once(&b.router_tensor_name))
                .map(String::as_str)
        })
        .collect();
    let out_blocks = resolve_expert_blocks(c.out)?;
    let out_block_names: BTreeSet<&str> = out_blocks
        .iter()
        .flat_map(|b| {
            b.expert_tensor_names
                .iter()
                .flatten()
                .chain(std::iter::once(&b.router_tensor_name))
                .map(String::as_str)
        })
        .collect();
    let mut n = 0;
    for r in c.src.records().filter(|r| !block_names.contains(r.name.as_str())) {
        let o = c.out.record(&r.name).with_context(|| format!("{} missing from output", r.name))?;
        if o.dtype != r.dtype || o.shape != r.shape || c.src.load_bytes(&r.name)? != c.out.load_bytes(&r.name)? {
            return fail(format!("{} differs from source", r.name));
        }
        n += 1;
    }
    let extra = c.out.len() - out_block_names.len();
    if extra != n {
        return fail(format!("output has {extra} non-expert tensors, source has {n}"));
    }
    Ok(format!("{n} tensors byte-identical"))
}

fn accounting(c: &Ctx) -> CheckResult {
    let blocks = resolve_expert_blocks(c.src)?;
    let predicted = predicted_counts(&count_params(c.src)?, &blocks, c.plan);
    let measured = count_params(c.out)?;
    if predicted != measured {
        return fail(format!("measured {measured:?}, plan predicts {predicted:?}"));
    }
    Ok(format!("{} expert parameters", measured.expert_params))
}

fn config(c: &Ctx) -> CheckResult {
    let expected = adjust_config(&c.src.config, c.plan)?;
    if expected.to_json_bytes() != c.out.config.to_json_bytes() {
        return fail("config.json differs from the adjusted source config".into());
    }
    Ok(format!(
        "{} routed experts, top-{}",
        c.out.config.num_routed_experts, c.out.config.num_experts_per_tok
    ))
}

fn healing_roles(c: &Ctx) -> CheckResult {
    let expected = emit_healing_manifest(c.out, c.plan)?;
    if expected.trainable != c.healing.trainable || expected.frozen != c.healing.frozen {
        return fail("healing manifest tensor lists differ from the output's roles".into());
    }
    Ok(format!("{} trainable, {} frozen", expected.trainable.len(), expected.frozen.len()))
}

fn forward_probe(c: &Ctx, seed: u64, probes: usize) -> CheckResult {
    if c.out.architecture != Architecture::Toy {
        return Ok(format!("skipped: forward probe runs on {} checkpoints only", Architecture::Toy));
    }
    let model = ToyModel::<f64>::load(c.out)?;
    for (i, x) in probe_inputs(model.hidden, probes, seed).iter().enumerate() {
        let t = model.forward(x)?;
        for (l, g) in t.gate_weights.iter().enumerate() {
            let k = model.top_k.min(g.len());
            let active = g.iter().filter(|&&w| w > 0.0).count();
            let sum: f64 = g.iter().sum();
            if active != k || (sum - 1.0).abs() > 1e-12 {
                return fail(format!("probe {i} layer {l}: {active} active, gate sum {sum}"));
            }
        }
        if !t.output.iter().all(|v| v.is_finite()) {
            return fail(format!("probe {i}: non-finite output"));
        }
    }
    Ok(format!("{probes} probes finite"))
}

pub fn verify(model: &Path, out: &Path, arch: Option<Architecture>, seed: u64, probes: usize) -> anyhow::Result<VerifyReport> {
    let src = open_checkpoint_as(model, arch).with_context(|| format!("opening {}", model.display()))?;
    let pruned = open_checkpoint(out).with_context(|| format!("opening {}", out.display()))?;
    let plan_bytes = std::fs::read(out.join(PLAN_FILE_NAME))
        .with_context(|| format!("reading {}", out.join(PLAN_FILE_NAME).display()))?;
    let plan = PruningPlan::from_json_bytes(&plan_bytes)?;
    let healing: HealingManifest = serde_json::from_slice(
        &std::fs::read(out.join(HEALING_FILE_NAME))
            .with_context(|| format!("reading {}", out.join(HEALING_FILE_NAME).display()))?,
    )?;
    let c = Ctx {
        src: &src,
        out: &pruned,
        plan: &plan,
        plan_bytes: &plan_bytes,
        healing: &healing,
    };

    let results: Vec<(&str, CheckResult)> = vec![
        ("provenance", provenance(&c)),
        ("router_shapes", router_shapes(&c)),
        ("expert_bytes", expert_bytes(&c)),
        ("untouched_bytes", untouched_bytes(&c)),
        ("parameter_accounting", accounting(&c)),
        ("config", config(&c)),
        ("healing_manifest", healing_roles(&c)),
        ("forward_finite", forward_probe(&c, seed, probes)),
    ];
    let checks: Vec<Check> = results
        .into_iter()
        .map(|(name, r)| match r {
            Ok(detail) => Check { name: name.into(), passed: true, detail },
            Err(e) => Check { name: name.into(), passed: false, detail: format!("{e:#}") },
        })
        .collect();
    Ok(VerifyReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

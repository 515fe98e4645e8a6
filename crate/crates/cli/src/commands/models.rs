use serde::Serialize;
use serde_json::json;
use xct_core::actstore::{estimate_norm, stream_batches, ActivationShard, NormStats};
use xct_core::dictcore::{eval_crosscoder, load_crosscoder, save_crosscoder, train_crosscoder, CrosscoderEval};
use xct_core::toylm::train_lm as run_train_lm;
use xct_core::util::{fmt_f64, mix_seed};

use super::{
    checkpoint_file, checkpoint_meta_file, crosscoder_file, crosscoder_name, settings, shard_file, Session,
    EVAL_CORPUS, EXTRACT_CORPUS, LM_CORPUS, NORMS_FILE, POSITIONS_FILE, VOCAB_FILE,
};
use crate::error::{CliError, CliResult};
use crate::manifest::StepSpec;

pub fn train_lm(s: &Session) -> CliResult<()> {
    let lm = &s.config.lm;
    let step = StepSpec {
        command: "train-lm",
        key: None,
        inputs: vec![VOCAB_FILE.into(), LM_CORPUS.into()],
        settings: settings(lm),
        seeds: vec![lm.seed],
    };
    s.step(step, || {
        let vocab = s.vocab()?;
        let seqs = s.sequences(LM_CORPUS, &vocab)?;
        let cfg = s.config.lm_config(vocab.len());
        let mut losses = String::from("step\tloss\n");
        let ckpts = run_train_lm(&cfg, &seqs, &lm.schedule, &s.config.optimizer(), vocab.pad(), |r| {
            losses.push_str(&format!("{}\t{}\n", r.step, fmt_f64(r.loss)));
        })?;
        let mut out = Vec::new();
        for c in &ckpts {
            c.save(&s.path(&checkpoint_file(&c.id)))?;
            out.push(checkpoint_file(&c.id));
            out.push(checkpoint_meta_file(&c.id));
        }
        out.push(s.write("lm/loss.tsv", losses.as_bytes())?);
        Ok(out)
    })
}

pub fn extract(s: &Session) -> CliResult<()> {
    let ids = s.config.extract_ids();
    let ex = &s.config.extract;
    let mut inputs = vec![VOCAB_FILE.to_string(), EXTRACT_CORPUS.to_string()];
    inputs.extend(ids.iter().flat_map(|id| [checkpoint_file(id), checkpoint_meta_file(id)]));
    let step = StepSpec {
        command: "extract",
        key: None,
        inputs,
        settings: json!({
            "checkpoints": ids,
            "n_tokens": ex.n_tokens,
            "norm_sample": ex.norm_sample,
            "context_len": s.config.lm.context_len,
        }),
        seeds: Vec::new(),
    };
    s.step(step, || {
        let vocab = s.vocab()?;
        let seqs = s.sequences(EXTRACT_CORPUS, &vocab)?;
        let ckpts = s.checkpoints(&ids)?;
        let refs: Vec<_> = ckpts.iter().collect();
        let shards = xct_core::actstore::extract(&refs, &seqs, ex.n_tokens, vocab.bos(), vocab.pad(), &s.path("acts"))?;
        let norms: Vec<NormStats> = shards
            .iter()
            .map(|sh| estimate_norm(sh, ex.norm_sample.min(sh.rows())))
            .collect::<xct_core::Result<_>>()?;
        let mut out: Vec<String> = ids.iter().map(|id| shard_file(id)).collect();
        out.push(POSITIONS_FILE.into());
        out.push(s.write_json(NORMS_FILE, &norms)?);
        Ok(out)
    })
}

pub fn train_xc(s: &Session) -> CliResult<()> {
    let xc = &s.config.crosscoder;
    let name = crosscoder_name(&xc.sources);
    let mut inputs = vec![NORMS_FILE.to_string(), POSITIONS_FILE.to_string()];
    inputs.extend(xc.sources.iter().map(|id| shard_file(id)));
    for &seed in &s.config.seeds {
        let mut hp = xc.hp.clone();
        hp.seed = seed;
        let shuffle = mix_seed(xc.shuffle_seed, seed);
        let step = StepSpec {
            command: "train-xc",
            key: Some(format!("{name}.seed{seed}")),
            inputs: inputs.clone(),
            settings: json!({ "sources": xc.sources, "hp": settings(&hp), "shuffle_seed": shuffle }),
            seeds: vec![seed],
        };
        s.step(step, || {
            let norms = s.norms(&xc.sources)?;
            let shards: Vec<ActivationShard> = xc
                .sources
                .iter()
                .map(|id| ActivationShard::open(&s.path(&shard_file(id))))
                .collect::<xct_core::Result<_>>()?;
            let refs: Vec<_> = shards.iter().collect();
            let stream = stream_batches(&refs, &norms, hp.batch_tokens, shuffle)?;
            let (params, log) = train_crosscoder(&hp, xc.sources.clone(), stream, |_| {})?;
            let file = crosscoder_file(&name, seed);
            save_crosscoder(&s.path(&file), &params, &norms)?;
            let mut t = String::from("step\tlambda\ttotal");
            for src in &xc.sources {
                t.push_str(&format!("\trecon_{src}"));
            }
            t.push_str("\tsparsity\tl0\trows\n");
            for r in &log {
                t.push_str(&format!("{}\t{}\t{}", r.step, fmt_f64(r.lambda), fmt_f64(r.total)));
                for v in &r.recon {
                    t.push_str(&format!("\t{}", fmt_f64(*v)));
                }
                t.push_str(&format!("\t{}\t{}\t{}\n", fmt_f64(r.sparsity), fmt_f64(r.l0), r.rows));
            }
            let log_file = format!("xc/{name}/seed{seed}/train_log.tsv");
            Ok(vec![file, s.write(&log_file, t.as_bytes())?])
        })?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SeedEval {
    seed: u64,
    #[serde(flatten)]
    eval: CrosscoderEval,
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    crosscoder: String,
    sources: Vec<String>,
    seeds: Vec<SeedEval>,
    mean_delta_ce: Vec<f64>,
    mean_frac_variance_explained: Vec<f64>,
    mean_l0: f64,
    mean_dead_count: f64,
}

pub fn eval_xc(s: &Session) -> CliResult<()> {
    let xc = &s.config.crosscoder;
    let name = crosscoder_name(&xc.sources);
    let seeds = s.config.seeds.clone();
    let mut inputs = vec![VOCAB_FILE.to_string(), EVAL_CORPUS.to_string()];
    inputs.extend(xc.sources.iter().flat_map(|id| [checkpoint_file(id), checkpoint_meta_file(id)]));
    inputs.extend(seeds.iter().map(|&seed| crosscoder_file(&name, seed)));
    let step = StepSpec {
        command: "eval-xc",
        key: Some(name.clone()),
        inputs,
        settings: json!({ "sources": xc.sources, "eval_sequences": xc.eval_sequences }),
        seeds: seeds.clone(),
    };
    s.step(step, || {
        let vocab = s.vocab()?;
        let seqs = s.sequences(EVAL_CORPUS, &vocab)?;
        let seqs = &seqs[..xc.eval_sequences.min(seqs.len())];
        let ckpts = s.checkpoints(&xc.sources)?;
        let refs: Vec<_> = ckpts.iter().collect();
        let mut evals = Vec::new();
        for &seed in &seeds {
            let (params, norms) = load_crosscoder(&s.path(&crosscoder_file(&name, seed)))?;
            if params.sources != xc.sources {
                return Err(CliError::Config(format!(
                    "crosscoder for seed {seed} has sources {:?}, expected {:?}",
                    params.sources, xc.sources
                )));
            }
            let eval = eval_crosscoder(&params, &norms, &refs, seqs, &[vocab.bos(), vocab.pad()], vocab.pad())?;
            evals.push(SeedEval { seed, eval });
        }
        let k = evals.len() as f64;
        let mean = |f: &dyn Fn(&CrosscoderEval) -> f64| evals.iter().map(|e| f(&e.eval)).sum::<f64>() / k;
        let n = xc.sources.len();
        let summary = EvalSummary {
            crosscoder: name.clone(),
            sources: xc.sources.clone(),
            mean_delta_ce: (0..n).map(|c| mean(&|e| e.delta_ce[c])).collect(),
            mean_frac_variance_explained: (0..n).map(|c| mean(&|e| e.frac_variance_explained[c])).collect(),
            mean_l0: mean(&|e| e.l0),
            mean_dead_count: mean(&|e| e.dead_count as f64),
            seeds: evals,
        };
        let mut t = String::from("seed\tsource\tdelta_ce\tfrac_variance_explained\tl0\tdead_count\tdict_size\n");
        let row = |t: &mut String, seed: &str, c: usize, dce: f64, fve: f64, l0: f64, dead: f64, dsz: usize| {
            t.push_str(&format!(
                "{seed}\t{}\t{}\t{}\t{}\t{}\t{dsz}\n",
                xc.sources[c],
                fmt_f64(dce),
                fmt_f64(fve),
                fmt_f64(l0),
                fmt_f64(dead)
            ));
        };
        for e in &summary.seeds {
            for c in 0..n {
                let v = &e.eval;
                let seed = e.seed.to_string();
                row(&mut t, &seed, c, v.delta_ce[c], v.frac_variance_explained[c], v.l0, v.dead_count as f64, v.dict_size);
            }
        }
        for c in 0..n {
            row(
                &mut t,
                "mean",
                c,
                summary.mean_delta_ce[c],
                summary.mean_frac_variance_explained[c],
                summary.mean_l0,
                summary.mean_dead_count,
                xc.hp.dict_size,
            );
        }
        Ok(vec![
            s.write_json(&format!("xc/{name}/eval.json"), &summary)?,
            s.write(&format!("xc/{name}/eval.tsv"), t.as_bytes())?,
        ])
    })
}

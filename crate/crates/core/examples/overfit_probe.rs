// Scratch probe for the end-to-end overfit run. Not part of the test suite.

use nae_core::config::RunConfig;
use nae_core::data::gen_synthetic_dataset;
use nae_core::evaluate::evaluate;
use nae_core::lexicon::ActionLexicon;
use nae_core::model::NaeModel;
use nae_core::score_space::partition_scores;
use nae_core::train::train;

fn main() {
    let mut cfg = RunConfig::default();
    let args: Vec<String> = std::env::args().collect();
    for pair in args.iter().skip(1) {
        let (k, v) = pair.split_once('=').expect("key=value");
        cfg.set(k, v).expect("valid key");
    }
    eprintln!(
        "steps={} peak_lr={} seed={} lambda={}",
        cfg.total_steps, cfg.peak_lr, cfg.seed, cfg.lambda_sparse
    );
    let t0 = std::time::Instant::now();
    let lexicon = ActionLexicon::standard(cfg.parts).unwrap();
    let (train_set, _) = gen_synthetic_dataset(&cfg, &lexicon).unwrap();
    let scores: Vec<f64> = train_set.iter().map(|s| s.score).collect();
    let partition = partition_scores(&scores, cfg.intervals).unwrap();
    let mut model = NaeModel::new(cfg, lexicon, partition).unwrap();
    let traces = train(&mut model, &train_set).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();

    let first = &traces[0];
    let last = traces.last().unwrap();
    eprintln!(
        "loss first: total={:.4} gen={:.4} ce_s={:.4} mse={:.6} ce_a={:.4} sparse={:.4}",
        first.total, first.gen, first.ce_s, first.mse, first.ce_a, first.sparse
    );
    eprintln!(
        "loss last:  total={:.4} gen={:.4} ce_s={:.4} mse={:.6} ce_a={:.4} sparse={:.4} sum_v={:.4}",
        last.total, last.gen, last.ce_s, last.mse, last.ce_a, last.sparse, last.sum_v
    );

    // interval accuracy on the training set
    let mut correct = 0;
    for s in &train_set {
        let (logits, target) = model.match_probabilities(s).unwrap();
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        if best == target {
            correct += 1;
        }
    }
    let t1 = std::time::Instant::now();
    let (report, records) = evaluate(&model, &train_set).unwrap();
    let eval_secs = t1.elapsed().as_secs_f64();

    let exact = records
        .iter()
        .filter(|r| r.generated == r.gold_captions[0])
        .count();
    eprintln!(
        "interval_acc={}/{} exact_captions={}/{}",
        correct,
        train_set.len(),
        exact,
        records.len()
    );
    eprintln!(
        "mAP={:.4} rho={:.4} R-l2={:.4} B4={:.4} M={:.4} C={:.4} Acc={:.4}",
        report.map,
        report.rho,
        report.r_l2,
        report.bleu4,
        report.meteor,
        report.cider,
        report.action_acc
    );
    eprintln!("train {train_secs:.1}s eval {eval_secs:.1}s");
    for r in records.iter().take(3) {
        eprintln!("  gen : {}", r.generated);
        eprintln!("  gold: {}", r.gold_captions[0]);
    }

    // same decode but with the gold-label template, to separate template
    // drift from video-identity confusion
    let mut exact_gold_template = 0;
    let mut score_word_diffs = 0;
    for s in &train_set {
        let pred = model.predict(&s.features).unwrap();
        let template = nae_core::generator::build_template(
            s.score,
            model.cfg.score_decimals,
            &s.actions,
            &model.lexicon,
            &model.vocab,
            model.cfg.slots_per_gap,
        )
        .unwrap();
        let toks = model
            .decode_with_template(&template, pred.e_v_star.clone())
            .unwrap();
        let text = model.vocab.decode(&toks).join(" ");
        if text == s.captions[0] {
            exact_gold_template += 1;
        }
        let rounded = (pred.score * 10.0).round() / 10.0;
        if (rounded - s.score).abs() > 1e-9 {
            score_word_diffs += 1;
        }
    }
    eprintln!(
        "exact_with_gold_template={}/{} pred_score_rendered_mismatch={}/{}",
        exact_gold_template,
        train_set.len(),
        score_word_diffs,
        train_set.len()
    );

    let mut detailed: Vec<(f64, f64, Vec<usize>)> = train_set
        .iter()
        .map(|s| {
            let pred = model.predict(&s.features).unwrap();
            ((pred.score - s.score).abs(), s.score, s.actions.clone())
        })
        .collect();
    detailed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    for (err, gold, actions) in detailed.iter().take(5) {
        eprintln!("  worst |err|={err:.3} gold={gold} actions={actions:?}");
    }
    let mut errs: Vec<f64> = detailed.iter().map(|d| d.0).collect();
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eprintln!(
        "score |err| min={:.4} median={:.4} p90={:.4} max={:.4}",
        errs[0],
        errs[errs.len() / 2],
        errs[(errs.len() * 9) / 10],
        errs[errs.len() - 1]
    );
    for probe_step in [500usize, 1000, 1500, 2000, 2500, 2999] {
        if probe_step < traces.len() {
            let t = &traces[probe_step];
            eprintln!(
                "  step {} lr={:.5} gen={:.5} ce_s={:.5} mse={:.7}",
                t.step, t.lr, t.gen, t.ce_s, t.mse
            );
        }
    }
}

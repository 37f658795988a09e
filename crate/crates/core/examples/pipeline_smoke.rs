use ndarray::{Array1, Array2};
use volrep_core::clip::{prepare_study_inputs, train_clip, ClipBundle, ClipBundleConfig, ClipConfig};
use volrep_core::cohort::{generate_cohort, load_cohort, CohortConfig, Split};
use volrep_core::heads::{
    extract_frozen_features, predict, train_multilabel_head, train_priority_head, HeadTrainConfig,
    LossKind,
};
use volrep_core::hier::{HierConfig, SeriesTokens, StudyEncoder};
use volrep_core::text::{
    pretrain_report_lm, LmConfig, LmTrainConfig, NameEncoderConfig, SeqNameEncoder,
    StudyNameEncoder,
};
use volrep_core::tokenizer::{
    filter_background, patch_volume, positional_encode, BackgroundFilter, PatchSpec,
    PositionalEncoding,
};
use volrep_core::vq::train::{build_token_pool, train_vqvae, VqTrainConfig};
use volrep_core::vq::quantize_batch;

fn main() -> volrep_core::Result<()> {
    let dir = std::path::Path::new("/tmp/drive-cohort");
    if dir.exists() {
        std::fs::remove_dir_all(dir).unwrap();
    }
    std::fs::create_dir_all(dir).unwrap();
    let cfg = CohortConfig {
        n_studies: 6,
        ..Default::default()
    };
    let manifest = generate_cohort(&cfg, 7, dir)?;
    println!("generated {} studies", manifest.studies.len());
    let (records, vocab, _cfg) = load_cohort(dir)?;
    let spec = PatchSpec::default();
    let grid = patch_volume(&records[0].sequences[0].1, &spec)?;
    println!("study 0 seq 0 -> {} tokens", grid.tokens.len());
    let mut tcfg = VqTrainConfig {
        steps: 3,
        batch_size: 4,
        eval_every: 2,
        eval_token_count: 8,
        ..Default::default()
    };
    tcfg.arch.codebook_size = 32;
    let pool = build_token_pool(
        &records,
        Split::Retrospective,
        &spec,
        &BackgroundFilter::default(),
    )?;
    println!("pool: {} tokens", pool.len());
    let out = std::path::Path::new("/tmp/drive-vq");
    if out.exists() {
        std::fs::remove_dir_all(out).unwrap();
    }
    std::fs::create_dir_all(out).unwrap();
    let run = train_vqvae(&pool, &pool, &tcfg, 11, Some(out))?;
    println!(
        "3 steps trained; final total loss {:.4}",
        run.train_curve.last().unwrap().total
    );
    for f in ["train_curve.csv", "val_curve.csv", "manifest.json", "params.bin"] {
        assert!(out.join(f).exists(), "missing {f}");
    }

    let reports: Vec<Vec<usize>> = records
        .iter()
        .map(|r| r.full_report.token_ids.clone())
        .collect();
    let lm_out = std::path::Path::new("/tmp/drive-lm");
    if lm_out.exists() {
        std::fs::remove_dir_all(lm_out).unwrap();
    }
    std::fs::create_dir_all(lm_out).unwrap();
    let lm_cfg = LmTrainConfig {
        lm: LmConfig {
            vocab_size: vocab.len(),
            width: 32,
            depth: 1,
            heads: 2,
            context: 32,
            embed_dim: 16,
        },
        steps: 5,
        batch_size: 4,
        eval_every: 5,
        ..Default::default()
    };
    let lm_run = pretrain_report_lm(&reports, &lm_cfg, 23, Some(lm_out))?;
    println!("lm 5 steps; val perplexity {:.2}", lm_run.final_val_ppl);
    assert!(lm_out.join("ppl_curve.csv").exists(), "missing ppl_curve.csv");
    let emb = lm_run
        .lm
        .encode_report(&lm_run.store, &vocab, &records[0].full_report.text);
    let norm: f64 = emb.iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("report embedding dim {} norm {:.4}", emb.len(), norm);

    let hier_cfg = HierConfig::default();
    let mut hstore = volrep_core::nn::params::ParamStore::new();
    let mut hr = volrep_core::rng::stream(31, "hier-init", 0);
    let name_cfg = NameEncoderConfig {
        vocab_size: vocab.len(),
        ..Default::default()
    };
    let esn = SeqNameEncoder::new(&mut hstore, &mut hr, name_cfg.clone())?;
    let estn = StudyNameEncoder::new(&mut hstore, &mut hr, name_cfg)?;
    let enc = StudyEncoder::new(&mut hstore, &mut hr, hier_cfg)?;
    let penc = PositionalEncoding::default();
    let vq = &run.model;
    let mut seq_embs: Vec<Array1<f64>> = Vec::new();
    for (meta, vol) in &records[0].sequences {
        let grid = patch_volume(vol, &spec)?;
        let fg = filter_background(&grid, &BackgroundFilter::default());
        if fg.tokens.is_empty() {
            continue;
        }
        let mut latents = Array2::zeros((fg.tokens.len(), hier_cfg.code_dim));
        let mut positions = Array2::zeros((fg.tokens.len(), hier_cfg.pos_dim));
        for (i, tok) in fg.tokens.iter().enumerate() {
            let z = vq.vq_encode(tok)?;
            let codebook = vq
                .store
                .value(vq.codebook_id)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("codebook is a matrix");
            let (_, q) = quantize_batch(&z.view().insert_axis(ndarray::Axis(0)), &codebook);
            latents.row_mut(i).assign(&q.row(0));
            positions
                .row_mut(i)
                .assign(&positional_encode(tok.grid_pos, fg.grid_extents, &penc));
        }
        let series = SeriesTokens { latents, positions };
        let name_emb = esn.embed(&hstore, &vocab, &meta.sequence_name);
        seq_embs.push(enc.vit_seq.encode_sequence(&hstore, &series, &name_emb)?);
    }
    let study_name = estn.embed(&hstore, &vocab, &records[0].study_name);
    let study = enc.vit_st.encode_study(&hstore, &seq_embs, &study_name)?;
    let snorm: f64 = study.iter().map(|v| v * v).sum::<f64>().sqrt();
    println!(
        "study embedding from {} series: dim {} norm {:.4}",
        seq_embs.len(),
        study.len(),
        snorm
    );

    let clip_inputs = prepare_study_inputs(
        &records,
        vq,
        &vocab,
        &spec,
        &BackgroundFilter::default(),
        &penc,
        64,
    )?;
    let bundle = ClipBundle::new(
        ClipBundleConfig {
            hier: hier_cfg,
            names: NameEncoderConfig {
                vocab_size: vocab.len(),
                ..Default::default()
            },
            lm: LmConfig {
                vocab_size: vocab.len(),
                ..Default::default()
            },
        },
        0.0,
        37,
    )?;
    let clip_out = std::path::Path::new("/tmp/drive-clip");
    if clip_out.exists() {
        std::fs::remove_dir_all(clip_out).unwrap();
    }
    let ccfg = ClipConfig {
        steps: 3,
        batch_size: 4,
        checkpoint_every: 2,
        eval_k: 2,
        ..Default::default()
    };
    let crun = train_clip(
        &clip_inputs[..4],
        &clip_inputs[4..],
        bundle,
        &ccfg,
        39,
        Some(clip_out),
    )?;
    println!(
        "clip 3 steps; total {:.4}; {} retrieval evals",
        crun.curve.last().unwrap().total,
        crun.evals.len()
    );
    assert!(clip_out.join("final").join("params.bin").exists());

    let table = extract_frozen_features(&clip_out.join("final"), &clip_inputs, &records)?;
    let retro = table.rows_in(Split::Retrospective).len();
    let pros = table.rows_in(Split::Prospective).len();
    println!(
        "frozen features: {} studies ({} retrospective, {} prospective), dim {}",
        table.rows.len(),
        retro,
        pros,
        table.dim
    );
    let head_cfg = HeadTrainConfig {
        hidden: 16,
        steps: 40,
        ..Default::default()
    };
    let diag = train_multilabel_head(&table, &head_cfg)?;
    let defined = diag.eval_auroc.iter().flatten().count();
    println!(
        "diagnosis head: {} of {} prospective AUROCs defined",
        defined,
        diag.eval_auroc.len()
    );
    let pri = train_priority_head(&table, LossKind::BinaryOrdinal, &head_cfg)?;
    println!(
        "priority head (binary ordinal): prospective accuracy {:.2}",
        pri.confusion.accuracy()
    );
    let predictions = predict(&diag.head, &pri.head, &table)?;
    assert_eq!(predictions.len(), table.rows.len());
    println!(
        "prediction records: {} (first priority {:?})",
        predictions.len(),
        predictions[0].predicted_priority
    );

    println!("artifacts present");
    Ok(())
}

use pointmap_core::dataset::{build_corpus, QueryRecord};
use pointmap_core::encoder::ModelWeights;
use pointmap_core::losses::Stage;
use pointmap_core::retrieval::{build_scene_index, localize, recall_at, retrieve, QueryComposition};
use pointmap_core::trainer::{run_stage, PipelineConfig};

fn main() {
    let t0 = std::time::Instant::now();
    let mut cfg = PipelineConfig::default();
    cfg.scenes = 16;
    let enc_cfg = cfg.encoder_config().unwrap();
    let text = cfg.text_encoder().unwrap();
    let (records, queries) = build_corpus(
        cfg.seed, cfg.scenes, &cfg.generator_config(), &enc_cfg,
        cfg.image_encoder_seed, &text,
    ).unwrap();
    println!("corpus built: {:?} ({} scenes x {} views)", t0.elapsed(), records.len(), records[0].n_views());

    let init = ModelWeights::<f32>::init(enc_cfg, cfg.model_seed).unwrap();

    // Baseline numbers before any training (frozen random encoder).
    let base_index = build_scene_index(&records, &init.clone()).unwrap();
    let r11_base = recall_at(&queries, &base_index, 1, 1, &text, QueryComposition::Concat).unwrap();
    println!("untrained R@1-1 = {r11_base:.3}");

    // Warmup stage.
    let mut wcfg = cfg.clone();
    wcfg.stage = Stage::Warmup;
    wcfg.steps = 800;
    wcfg.lr_warmup_steps = 100;
    let t1 = std::time::Instant::now();
    let warm = run_stage(Stage::Warmup, &records, &wcfg, init, None).unwrap();
    let wfirst = &warm.report.steps[..10];
    let wlast = &warm.report.steps[warm.report.steps.len()-10..];
    println!("warmup done {:?}: first10 avg {:.4} last10 avg {:.4}",
        t1.elapsed(),
        wfirst.iter().map(|s| s.total).sum::<f64>()/10.0,
        wlast.iter().map(|s| s.total).sum::<f64>()/10.0);

    // Main stage.
    let mut mcfg = cfg.clone();
    mcfg.stage = Stage::Main;
    mcfg.steps = 1600;
    mcfg.lr_warmup_steps = 100;
    let t2 = std::time::Instant::now();
    let main = run_stage(Stage::Main, &records, &mcfg, warm.weights, None).unwrap();
    let mfirst = &main.report.steps[..50];
    let mlast = &main.report.steps[main.report.steps.len()-50..];
    println!("main done {:?}: first50 avg total {:.4} last50 avg {:.4}",
        t2.elapsed(),
        mfirst.iter().map(|s| s.total).sum::<f64>()/50.0,
        mlast.iter().map(|s| s.total).sum::<f64>()/50.0);
    println!("  first50 view {:.4} scene {:.4} pjepa {:.4}",
        mfirst.iter().map(|s| s.l_view).sum::<f64>()/50.0,
        mfirst.iter().map(|s| s.l_scene).sum::<f64>()/50.0,
        mfirst.iter().map(|s| s.l_pjepa).sum::<f64>()/50.0);
    println!("  last50  view {:.4} scene {:.4} pjepa {:.4}",
        mlast.iter().map(|s| s.l_view).sum::<f64>()/50.0,
        mlast.iter().map(|s| s.l_scene).sum::<f64>()/50.0,
        mlast.iter().map(|s| s.l_pjepa).sum::<f64>()/50.0);

    // Retrieval with the target encoder.
    let target = main.target.as_ref().unwrap();
    let index = build_scene_index(&records, target).unwrap();
    let r11 = recall_at(&queries, &index, 1, 1, &text, QueryComposition::Concat).unwrap();
    let r15 = recall_at(&queries, &index, 1, 5, &text, QueryComposition::Concat).unwrap();
    println!("R@1-1 = {:.3} ({}/16), R@1-5 = {:.3} ({}/16)", r11, (r11*16.0).round(), r15, (r15*16.0).round());

    // Localize: per scene, plant the first view whose caption is unique.
    let mut loc_hits = 0;
    let mut loc_hits_v0 = 0;
    for record in &records {
        let entry = index.scene(&record.id).unwrap();
        let planted = (0..record.views.len())
            .find(|&i| record.views.iter().enumerate()
                .all(|(j, v)| j == i || v.caption != record.views[i].caption))
            .unwrap_or(0);
        let q = text.embed::<f32>(&record.views[planted].caption).unwrap();
        let ranked = localize(&entry.views, &q, 3).unwrap();
        if ranked[0].0 == planted { loc_hits += 1; }
        let q0 = text.embed::<f32>(&record.views[0].caption).unwrap();
        let ranked0 = localize(&entry.views, &q0, 3).unwrap();
        if ranked0[0].0 == 0 { loc_hits_v0 += 1; }
    }
    println!("localize first-hit (unique plant): {loc_hits}/16, (view 0): {loc_hits_v0}/16");

    // Quick retrieval sanity with one query text.
    let q0: &QueryRecord = &queries[0];
    let emb = text.embed::<f32>(&q0.texts[0]).unwrap();
    let top = retrieve(&emb, &index, 3).unwrap();
    println!("query for {}: {:?}", q0.scene_id, top);
    println!("final tau = {}", main.weights.tau());
    // Same metrics with the effective context encoder for comparison.
    let adapters = main.weights.adapters.clone().unwrap();
    let eff = pointmap_core::encoder::effective_weights(&main.weights, &adapters).unwrap();
    let eff_index = build_scene_index(&records, &eff).unwrap();
    let r11e = recall_at(&queries, &eff_index, 1, 1, &text, QueryComposition::Concat).unwrap();
    let mut loc_eff = 0;
    for record in &records {
        let entry = eff_index.scene(&record.id).unwrap();
        let planted = (0..record.views.len())
            .find(|&i| record.views.iter().enumerate()
                .all(|(j, v)| j == i || v.caption != record.views[i].caption))
            .unwrap_or(0);
        let q = text.embed::<f32>(&record.views[planted].caption).unwrap();
        let ranked = localize(&entry.views, &q, 3).unwrap();
        if ranked[0].0 == planted { loc_eff += 1; }
    }
    println!("context-encoder: R@1-1 = {:.3}, localize = {}/16", r11e, loc_eff);
    println!("total elapsed {:?}", t0.elapsed());
}

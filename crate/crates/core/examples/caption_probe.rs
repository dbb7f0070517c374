use pointmap_core::dataset::build_corpus;
use pointmap_core::trainer::PipelineConfig;
use std::collections::HashSet;

fn main() {
    let cfg = PipelineConfig { scenes: 16, ..Default::default() };
    let enc_cfg = cfg.encoder_config().unwrap();
    let text = cfg.text_encoder().unwrap();
    let (records, _) = build_corpus(
        cfg.seed, cfg.scenes, &cfg.generator_config(), &enc_cfg,
        cfg.image_encoder_seed, &text,
    ).unwrap();
    let mut total_dup = 0;
    for r in &records {
        let caps: Vec<&str> = r.views.iter().map(|v| v.caption.as_str()).collect();
        let uniq: HashSet<&str> = caps.iter().copied().collect();
        let dups = caps.len() - uniq.len();
        total_dup += dups;
        // does view 0's caption appear elsewhere?
        let v0_dup = caps[1..].iter().filter(|c| **c == caps[0]).count();
        println!("{}: {} views, {} unique, v0 caption duplicated {}x | {}", r.id, caps.len(), uniq.len(), v0_dup, &caps[0][..caps[0].len().min(70)]);
    }
    println!("total duplicate captions across corpus: {total_dup}");
}

// scratch diagnostic: stage-0 task accuracies on a trained checkpoint
use std::collections::HashMap;
use std::path::PathBuf;

use lavic::checkpoint::{load_archive, vlm_from_archive};
use lavic::config::RunConfig;
use lavic::corpus::{load_catalog, read_jsonl, Example, Speaker, Utterance};
use lavic::distill::generate_description;
use lavic::image::Raster;
use lavic::lm::generate_greedy;
use lavic::model::SeqElem;
use lavic::recommend::{build_recommendation_prompt, PrecomputedSlots, PromptMode};
use lavic::retrieval::CandidateSlate;
use lavic::vision::{encode_item, sub_image_patches};
use lavic::vocab::{detokenize_lossy, tokenize, BOS};

fn main() {
    let work = PathBuf::from("/tmp/cal6/work");
    let cfg = RunConfig::default();
    let stage = std::env::args().nth(1).unwrap_or("stage0".into());
    let vlm =
        vlm_from_archive(&load_archive(&work.join("checkpoints").join(&stage)).unwrap()).unwrap();
    let catalog = load_catalog(&work.join("items.jsonl")).unwrap();
    let mut images = HashMap::new();
    for it in &catalog {
        images.insert(it.item_id.clone(), Raster::load_ppm(&work.join(&it.image_path)).unwrap());
    }

    // caption color accuracy on first 30 items
    let colors0 = cfg.data.colors.clone();
    let center_color = |id: &str| -> String {
        let img = &images[id];
        let px = img.get(img.side / 2, img.side / 2);
        colors0
            .iter()
            .min_by_key(|n| {
                let c = lavic::corpus::synth::color_rgb(n).unwrap();
                (0..3).map(|i| (px[i] as i64 - c[i] as i64).pow(2)).sum::<i64>()
            })
            .unwrap()
            .clone()
    };
    let mut cap_hits = 0;
    for (k, it) in catalog.iter().take(30).enumerate() {
        let patches = sub_image_patches(&images[&it.item_id], &vlm.vcfg).unwrap();
        let d = generate_description(&vlm, it, &patches, 64, "probe").unwrap();
        let truth = center_color(&it.item_id);
        if k < 5 {
            eprintln!("  desc {}: {:?} (true {truth})", it.item_id, d.description);
        }
        if d.description.contains(&truth) {
            cap_hits += 1;
        }
    }
    eprintln!("caption color: {cap_hits}/30");

    // copy accuracy
    let mut hits = 0;
    for i in 0..20 {
        let s = format!("QZX{i:07}");
        let head = format!("copy: {s}\nanswer: ");
        let mut elems = vec![SeqElem::Token(BOS)];
        let toks = tokenize(&head);
        for t in &toks {
            elems.push(SeqElem::Token(*t));
        }
        let out = generate_greedy(&vlm, &elems, 12).unwrap();
        let txt = detokenize_lossy(&out);
        if i < 3 {
            eprintln!("  copy {s:?} -> {txt:?}");
        }
        if txt.trim() == s {
            hits += 1;
        }
    }
    eprintln!("copy: {hits}/20");

    // compact slots for everything
    let mut compact = HashMap::new();
    let mut full = HashMap::new();
    for it in &catalog {
        let set = encode_item(&vlm, &images[&it.item_id]).unwrap();
        compact.insert(it.item_id.clone(), set.compact());
        full.insert(it.item_id.clone(), set.full_concat());
    }
    let slots = PrecomputedSlots { compact, full, r: vlm.vcfg.r() };
    let titles: HashMap<String, String> =
        catalog.iter().map(|i| (i.item_id.clone(), i.title.clone())).collect();

    // pretrain-style 4-candidate selection: gt + 3 others
    let colors = cfg.data.colors.clone();
    let color_of = |id: &str| -> String {
        let img = &images[id];
        let px = img.get(img.side / 2, img.side / 2);
        colors
            .iter()
            .min_by_key(|n| {
                let c = lavic::corpus::synth::color_rgb(n).unwrap();
                (0..3).map(|i| (px[i] as i64 - c[i] as i64).pow(2)).sum::<i64>()
            })
            .unwrap()
            .clone()
    };
    let mut hits4 = 0;
    let n4 = 50;
    for (i, it) in catalog.iter().take(n4).enumerate() {
        // the item's ambiguity group, catalog IDs (stage-2 style)
        let mut candidates: Vec<String> = catalog
            .iter()
            .filter(|c| c.title == it.title)
            .map(|c| c.item_id.clone())
            .collect();
        candidates.sort();
        let gt_index = candidates.iter().position(|c| *c == it.item_id).unwrap();
        let ex = Example {
            conv_id: format!("P{i:05}"),
            turn: 2,
            context: vec![Utterance {
                speaker: Speaker::Seeker,
                text: format!("looking for a {} in {}", it.title, color_of(&it.item_id)),
            }],
            ground_truth_item: it.item_id.clone(),
        };
        let slate = CandidateSlate {
            example_ref: ex.example_ref(),
            candidates,
            ground_truth_index: gt_index,
            swapped: false,
        };
        let p = build_recommendation_prompt(&ex, &slate, &titles, &slots, PromptMode::Compact, 1024, false)
            .unwrap();
        let out = generate_greedy(&vlm, &p.as_seq(), 12).unwrap();
        let txt = detokenize_lossy(&out);
        if i < 5 {
            eprintln!("  sel4 gt {} -> {:?}", it.item_id, txt);
        }
        if txt.trim() == it.item_id {
            hits4 += 1;
        }
    }
    eprintln!("selection-4 (pretrain style): {hits4}/{n4}");

    // single-candidate echo: copy the one listed ID
    let mut hits1 = 0;
    for (i, it) in catalog.iter().take(30).enumerate() {
        let rid = format!("K{}XW{:06}", (b'A' + (i % 26) as u8) as char, i * 7 % 1_000_000);
        let mut t1 = titles.clone();
        t1.insert(rid.clone(), it.title.clone());
        let mut s1compact = HashMap::new();
        s1compact.insert(rid.clone(), slots.compact[&it.item_id].clone());
        let s1 = PrecomputedSlots { compact: s1compact, full: HashMap::new(), r: vlm.vcfg.r() };
        let ex = Example {
            conv_id: format!("E{i:05}"),
            turn: 2,
            context: vec![Utterance {
                speaker: Speaker::Seeker,
                text: format!("looking for a {} in {}", it.title, color_of(&it.item_id)),
            }],
            ground_truth_item: rid.clone(),
        };
        let slate = CandidateSlate {
            example_ref: ex.example_ref(),
            candidates: vec![rid.clone()],
            ground_truth_index: 0,
            swapped: false,
        };
        let p = build_recommendation_prompt(&ex, &slate, &t1, &s1, PromptMode::Compact, 1024, false)
            .unwrap();
        let out = generate_greedy(&vlm, &p.as_seq(), 12).unwrap();
        let txt = detokenize_lossy(&out);
        if i < 4 {
            eprintln!("  echo {rid} -> {txt:?}");
        }
        if txt.trim() == rid {
            hits1 += 1;
        }
    }
    eprintln!("echo-1: {hits1}/30");

    // distinct-title selection, text only, random IDs (task-5 style)
    let mut hits_t = 0;
    let empty = PrecomputedSlots { compact: HashMap::new(), full: HashMap::new(), r: vlm.vcfg.r() };
    for (i, it) in catalog.iter().take(30).enumerate() {
        let mut cand: Vec<&lavic::corpus::Item> = vec![it];
        for c in catalog.iter() {
            if cand.len() >= 4 {
                break;
            }
            if cand.iter().all(|x| x.title != c.title) {
                cand.push(c);
            }
        }
        let ids: Vec<String> =
            (0..4).map(|j| format!("Q{}Z{:05}R{}", (b'A' + ((i + j) % 26) as u8) as char, i * 13 + j, j)).collect();
        let gt_pos = (i * 7) % 4;
        let mut cand2 = cand.clone();
        cand2.swap(0, gt_pos);
        let mut t2 = HashMap::new();
        for (j, c) in cand2.iter().enumerate() {
            t2.insert(ids[j].clone(), c.title.clone());
        }
        let gt_id = &ids[gt_pos];
        let ex = Example {
            conv_id: format!("T{i:05}"),
            turn: 2,
            context: vec![Utterance {
                speaker: Speaker::Seeker,
                text: format!("looking for a {} in {}", it.title, color_of(&it.item_id)),
            }],
            ground_truth_item: gt_id.clone(),
        };
        let slate = CandidateSlate {
            example_ref: ex.example_ref(),
            candidates: ids.clone(),
            ground_truth_index: gt_pos,
            swapped: false,
        };
        let p = build_recommendation_prompt(&ex, &slate, &t2, &empty, PromptMode::TextOnly, 1024, false)
            .unwrap();
        let out = generate_greedy(&vlm, &p.as_seq(), 12).unwrap();
        let txt = detokenize_lossy(&out);
        if i < 4 {
            eprintln!("  seltitle gt {} (pos {gt_pos}) -> {:?}", gt_id, txt);
        }
        if txt.trim() == gt_id.as_str() {
            hits_t += 1;
        }
    }
    eprintln!("selection-title (distinct titles, text only): {hits_t}/30");

    // real 10-candidate slates from retrieve output
    let slates: Vec<CandidateSlate> = read_jsonl(&work.join("slates.jsonl")).unwrap();
    let convs = lavic::corpus::load_conversations(&work.join("convs.jsonl")).unwrap();
    let mut by_ref: HashMap<String, Example> = HashMap::new();
    for c in &convs {
        for e in lavic::corpus::expand_examples(c) {
            by_ref.insert(e.example_ref(), e);
        }
    }
    let mut hits10 = 0;
    let mut shown = 0;
    let n10 = 50;
    for s in slates.iter().take(n10) {
        let ex = &by_ref[&s.example_ref];
        let p = build_recommendation_prompt(ex, s, &titles, &slots, PromptMode::Compact, 1024, false)
            .unwrap();
        let out = generate_greedy(&vlm, &p.as_seq(), 12).unwrap();
        let txt = detokenize_lossy(&out);
        if shown < 5 {
            eprintln!("  sel10 gt {} -> {:?}", ex.ground_truth_item, txt);
            shown += 1;
        }
        if txt.trim() == ex.ground_truth_item {
            hits10 += 1;
        }
    }
    eprintln!("selection-10 (real slates): {hits10}/{n10}");
}

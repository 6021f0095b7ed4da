// scratch: can 2 items with different colors be caption-discriminated at all?
use std::collections::HashMap;
use std::path::PathBuf;

use lavic::config::RunConfig;
use lavic::corpus::load_catalog;
use lavic::distill::build_description_prompt;
use lavic::image::Raster;
use lavic::lm::generate_greedy;
use lavic::model::{batch_loss_and_grads, Scope, SeqElem, Sgd, TrainSeq, Vlm};
use lavic::vision::{encode_item, sub_image_patches};
use lavic::vocab::{detokenize_lossy, tokenize, EOS};

fn main() {
    let work = PathBuf::from("/tmp/cal9/work");
    let cfg = RunConfig::default();
    let catalog = load_catalog(&work.join("items.jsonl")).unwrap();
    let mut images = HashMap::new();
    for it in &catalog {
        images.insert(it.item_id.clone(), Raster::load_ppm(&work.join(&it.image_path)).unwrap());
    }
    let lr: f64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let mult: f64 = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(10.0);
    let n: usize = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(2);

    let mut vlm = Vlm::init(&cfg.vision, &cfg.lm, 0);
    let mut opt = Sgd::new(lr, 0.9, 0.0).with_vision_lr_mult(mult);
    let items: Vec<_> = catalog.iter().take(n).collect();
    let caps = ["red circle", "green circle", "yellow circle", "pink circle"];
    let patches: Vec<_> = items
        .iter()
        .map(|it| sub_image_patches(&images[&it.item_id], &cfg.vision).unwrap())
        .collect();
    for step in 0..400 {
        let mut tot = 0.0;
        for (k, it) in items.iter().enumerate() {
            let mut elems = build_description_prompt(it, &patches[k]);
            let start = elems.len();
            for t in tokenize(caps[k % caps.len()]) {
                elems.push(SeqElem::Token(t));
            }
            elems.push(SeqElem::Token(EOS));
            let end = elems.len();
            let seq = TrainSeq { elems, target: start..end };
            let (loss, grads) = batch_loss_and_grads(&vlm, &[seq], Scope::All, None).unwrap();
            opt.update(&mut vlm, &grads);
            tot += loss;
        }
        if step % 20 == 0 || step == 399 {
            let mut outs = String::new();
            for (k, it) in items.iter().enumerate() {
                let p = build_description_prompt(it, &patches[k]);
                let o = generate_greedy(&vlm, &p, 16).unwrap();
                outs.push_str(&format!(" {:?}", detokenize_lossy(&o)));
            }
            let e0 = encode_item(&vlm, &images[&items[0].item_id]).unwrap().compact();
            let e1 = encode_item(&vlm, &images[&items[1].item_id]).unwrap().compact();
            let d = (&e0 - &e1).mapv(|x| x * x).sum().sqrt();
            let n0 = e0.mapv(|x| x * x).sum().sqrt();
            eprintln!("step {step} loss {:.4} dist {d:.4} norm {n0:.4}:{outs}", tot / items.len() as f64);
        }
    }
}

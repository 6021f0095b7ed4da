// scratch diagnostic: vision pathway signal and gradient magnitudes
use std::collections::HashMap;
use std::path::PathBuf;

use lavic::checkpoint::{load_archive, vlm_from_archive};
use lavic::config::RunConfig;
use lavic::corpus::load_catalog;
use lavic::distill::build_description_prompt;
use lavic::image::Raster;
use lavic::model::{batch_loss_and_grads, Scope, SeqElem, TrainSeq, Vlm};
use lavic::vision::{encode_item, sub_image_patches};
use lavic::vocab::{tokenize, EOS};

fn main() {
    let work = PathBuf::from("/tmp/cal9/work");
    let cfg = RunConfig::default();
    let catalog = load_catalog(&work.join("items.jsonl")).unwrap();
    let mut images = HashMap::new();
    for it in &catalog {
        images.insert(it.item_id.clone(), Raster::load_ppm(&work.join(&it.image_path)).unwrap());
    }
    let which = std::env::args().nth(1).unwrap_or("init".into());
    let vlm = if which == "init" {
        Vlm::init(&cfg.vision, &cfg.lm, 0)
    } else {
        vlm_from_archive(&load_archive(&work.join("checkpoints").join(&which)).unwrap()).unwrap()
    };

    // embedding separation across one ambiguity group (colors differ)
    let group: Vec<_> = catalog.iter().filter(|c| c.title == catalog[0].title).collect();
    let encs: Vec<_> = group
        .iter()
        .map(|it| encode_item(&vlm, &images[&it.item_id]).unwrap().compact())
        .collect();
    for i in 0..encs.len() {
        for j in (i + 1)..encs.len() {
            let d = (&encs[i] - &encs[j]).mapv(|x| x * x).sum().sqrt();
            eprintln!("compact dist {} vs {}: {d:.4}", group[i].item_id, group[j].item_id);
        }
    }
    let n0 = encs[0].mapv(|x| x * x).sum().sqrt();
    eprintln!("compact norm of first: {n0:.4}");
    // token embedding scale for comparison
    let te = vlm.params.lm.tok_emb.row(97).mapv(|x: f64| x * x).sum().sqrt();
    eprintln!("token emb norm (a): {te:.4}");

    // gradient norms by parameter family on one full-token caption example
    let it = &catalog[0];
    let patches = sub_image_patches(&images[&it.item_id], &cfg.vision).unwrap();
    let mut elems = build_description_prompt(it, &patches);
    let start = elems.len();
    for t in tokenize("a red circle") {
        elems.push(SeqElem::Token(t));
    }
    elems.push(SeqElem::Token(EOS));
    let end = elems.len();
    let seq = TrainSeq { elems, target: start..end };
    let (loss, grads) = batch_loss_and_grads(&vlm, &[seq], Scope::All, None).unwrap();
    eprintln!("caption loss: {loss:.4}");
    let mut fams: Vec<(String, f64)> = Vec::new();
    for (name, g) in &grads {
        let fam = name.split('.').take(2).collect::<Vec<_>>().join(".");
        let ss = g.mapv(|x| x * x).sum();
        if let Some(e) = fams.iter_mut().find(|(f, _)| *f == fam) {
            e.1 += ss;
        } else {
            fams.push((fam, ss));
        }
    }
    fams.sort_by(|a, b| a.0.cmp(&b.0));
    for (f, ss) in fams {
        eprintln!("grad norm {f}: {:.3e}", ss.sqrt());
    }
}

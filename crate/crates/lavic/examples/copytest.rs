use std::path::PathBuf;
use lavic::checkpoint::{load_archive, vlm_from_archive};
use lavic::lm::generate_greedy;
use lavic::model::SeqElem;
use lavic::vocab::{detokenize_lossy, tokenize, BOS};
fn main() {
    let work = PathBuf::from("/tmp/cal3/work40");
    let vlm = vlm_from_archive(&load_archive(&work.join("checkpoints/stage0")).unwrap()).unwrap();
    for head in ["copy: QZX4815162\nanswer: ",        // 9 chars (shifted -1)
                 "copy: QZX48151623\nanswer: ",       // 10 chars (in-distribution)
                 "copy: QZX481516234\nanswer: ",      // 11 chars (shifted +1)
                 "copy:  QZX48151623\nanswer: ",      // 10 chars, +1 pad
                 "say: QZX48151623\nanswer: "] {      // different prefix
        let mut elems = vec![SeqElem::Token(BOS)];
        for t in tokenize(head) { elems.push(SeqElem::Token(t)); }
        let out = generate_greedy(&vlm, &elems, 12).unwrap();
        eprintln!("{head:?} -> {:?}", detokenize_lossy(&out));
    }
}

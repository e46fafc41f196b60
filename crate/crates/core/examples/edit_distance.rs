//! Word error rate of an N-best list: rank-1, oracle best and oracle worst.

use nbest_rescore::metrics::{hypothesis_errors, oracle_wer, text_edit_distance, OracleMode};
use nbest_rescore::nbest::{Hypothesis, NBestList};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let list = NBestList::new(
        "utt-1",
        "play dickie jones movies",
        vec![
            Hypothesis::new("play the key jones movies", 208.0, 50.0)?,
            Hypothesis::new("play ricky jones movies", 286.0, 48.0)?,
            Hypothesis::new("play dickie jones movies", 638.0, 20.0)?,
        ],
    );
    let (per_hyp, _) = hypothesis_errors(&list);
    for (h, e) in list.hypotheses.iter().zip(&per_hyp) {
        println!("{:<28} cost {:>6.1}  errors {}", h.text(), h.ondevice_cost(), e.errors);
    }
    let data = [list];
    println!("oracle best WER  {:.2}", oracle_wer(&data, OracleMode::Best)?);
    println!("oracle worst WER {:.2}", oracle_wer(&data, OracleMode::Worst)?);

    // Tokens are case-folded before comparison.
    let e = text_edit_distance("Play Red Smoke", "play red smoke now");
    println!("'Play Red Smoke' vs 'play red smoke now': {} error(s) over {} words", e.errors, e.ref_len);
    Ok(())
}

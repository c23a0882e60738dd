//! Diarization error rate between two RTTM strings, with and without a
//! forgiveness collar.
//!
//! cargo run --example score_der

use told::metrics::{der, format_score_report, rttm_parse, rttm_parse_all, score_recordings};

const REFERENCE: &str = "\
SPEAKER meet 1 0.00 4.00 <NA> <NA> alice <NA> <NA>
SPEAKER meet 1 3.50 3.00 <NA> <NA> bob <NA> <NA>
SPEAKER meet 1 8.00 2.00 <NA> <NA> alice <NA> <NA>
";

const HYPOTHESIS: &str = "\
SPEAKER meet 1 0.10 3.70 <NA> <NA> S0 <NA> <NA>
SPEAKER meet 1 3.80 2.70 <NA> <NA> S1 <NA> <NA>
SPEAKER meet 1 8.00 1.50 <NA> <NA> S1 <NA> <NA>
";

fn main() -> told::Result<()> {
    let (r, h) = (rttm_parse(REFERENCE)?, rttm_parse(HYPOTHESIS)?);
    for collar in [0.0, 0.25] {
        let d = der(&r, &h, collar, 0.001)?;
        println!(
            "collar {collar:.2}: DER {:.4} (miss {:.3}, false alarm {:.3}, confusion {:.3}, scored {:.3})",
            d.der, d.miss, d.false_alarm, d.confusion, d.scored_speech
        );
    }
    let rows = score_recordings(&rttm_parse_all(REFERENCE)?, &rttm_parse_all(HYPOTHESIS)?, 0.25, 0.001)?;
    print!("{}", format_score_report(&rows)?);
    Ok(())
}

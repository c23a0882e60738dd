//! Power-set codebook: class counts, the class table and a round trip of a
//! label matrix with a frame that exceeds the overlap limit.
//!
//! cargo run --example pse_codebook

use told::pse::{class_count, PseCodebook};
use told::{ActivityMatrix, ActivityVector};

fn main() -> told::Result<()> {
    for (s_max, k_max) in [(2, 2), (3, 2), (4, 2), (8, 2), (8, 3)] {
        println!("s_max {s_max} k_max {k_max}: {} classes", class_count(s_max, k_max));
    }

    let book = PseCodebook::new(4, 2)?;
    print!("{}", book.to_table());

    let v = ActivityVector::from_ints(&[1, 0, 1, 0])?;
    let class = book.encode_class(&v)?;
    println!("{:?} -> class {class} -> {:?}", v.bits(), book.decode_class(class)?.bits());

    // The last frame has three active speakers; it is clamped to two.
    let labels = ActivityMatrix::from_rows(&[
        ActivityVector::from_ints(&[0, 0, 0, 0])?,
        ActivityVector::from_ints(&[1, 0, 0, 0])?,
        ActivityVector::from_ints(&[1, 1, 0, 0])?,
        ActivityVector::from_ints(&[0, 1, 1, 1])?,
    ])?;
    let seq = book.encode_matrix(&labels)?;
    println!("classes {:?} of {}", seq.classes, seq.n_classes);
    for row in book.decode_sequence(&seq)?.rows() {
        println!("  {:?}", row.bits());
    }
    println!("clamped frames so far: {}", told::pse::clamp_events());
    Ok(())
}

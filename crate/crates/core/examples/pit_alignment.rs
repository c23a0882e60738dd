//! Permutation-invariant alignment of slot posteriors to reference speakers,
//! solved with the Hungarian algorithm and checked against exhaustive search.
//!
//! cargo run --example pit_alignment

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use told::alignment::{brute_force_pit, map_speakers_for_eval, pit_align};
use told::ActivityMatrix;

fn main() -> told::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (frames, speakers) = (40, 4);
    let labels = ActivityMatrix::from_fn(frames, speakers, |t, s| (t / 5 + s) % 3 == 0);

    // Slot k tracks speaker (k + 1) mod 4, with noise.
    let posteriors: Vec<f64> = (0..frames * speakers)
        .map(|i| {
            let (t, k) = (i / speakers, i % speakers);
            let target = if labels.get(t, (k + 1) % speakers) { 0.85 } else { 0.15 };
            (target + rng.random_range(-0.1..0.1f64)).clamp(0.01, 0.99)
        })
        .collect();

    let fast = pit_align(&posteriors, &labels)?;
    let slow = brute_force_pit(&posteriors, &labels)?;
    println!("hungarian   perm {:?} loss {:.6}", fast.perm, fast.loss);
    println!("exhaustive  perm {:?} loss {:.6}", slow.perm, slow.loss);

    let hyp = labels.permute_columns(&[2, 0, 3, 1]);
    println!("eval mapping {:?}", map_speakers_for_eval(&labels, &hyp)?.hyp_to_ref);
    Ok(())
}

//! Lives in its own test binary so no concurrently running test disturbs the
//! allocator high-water mark.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rwkvx::bench::alloc::{PeakProbe, TrackingAllocator};
use rwkvx::rwkv7::rwkv7_forward_with;
use rwkvx::{Rwkv7Inputs, Rwkv7State};

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

fn random_inputs(rng: &mut ChaCha8Rng, d_k: usize, d_v: usize) -> Rwkv7Inputs<f64> {
    let mut vec = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(lo..hi)).collect() };
    let w = vec(d_k, 0.05, 1.0);
    let a = vec(d_k, 0.0, 1.0);
    let kappa = vec(d_k, -1.0, 1.0);
    let k_tilde = vec(d_k, -1.0, 1.0);
    let v = vec(d_v, -1.0, 1.0);
    let r = vec(d_k, -1.0, 1.0);
    Rwkv7Inputs::new(w.into(), a.into(), kappa.into(), k_tilde.into(), v.into(), r.into()).unwrap()
}

#[test]
fn streaming_forward_memory_is_flat_in_length() {
    let (d_k, d_v) = (8, 8);
    let run = |len: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checksum = 0.0;
        let probe = PeakProbe::start();
        let inputs = (0..len).map(move |_| random_inputs(&mut rng, d_k, d_v));
        rwkv7_forward_with(inputs, Rwkv7State::zeros(d_v, d_k), |_, y| checksum += y[0]).unwrap();
        assert!(checksum.is_finite());
        probe.peak_bytes()
    };
    let short = run(1_000);
    let long = run(50_000);
    assert!(short > 0);
    assert!(long <= short + 1024, "peak grew from {short} to {long} bytes");
}

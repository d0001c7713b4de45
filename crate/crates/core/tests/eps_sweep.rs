#[test]
fn eps_sweep() {
    use snn_core::harness::gradcheck::{gradcheck, gradcheck_debug};
    use snn_core::harness::seeds::{mix, Tag};
    let r = gradcheck(25, 777, 1e-4).unwrap();
    for (k, e) in r.per_program.iter().enumerate() {
        if *e > 1e-4 {
            println!("program {k} err {e:.3e}");
            gradcheck_debug(mix(777, Tag::Gradcheck as u64, k as u64), 1e-4);
            gradcheck_debug(mix(777, Tag::Gradcheck as u64, k as u64), 1e-5);
        }
    }
}

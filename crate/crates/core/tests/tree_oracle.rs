//! The prefix tree against a from-scratch reference, and inclusion proofs
//! against random tampering.

mod common;

use common::{build, count_forgeries, directory, oracle_root};
use ktsim::id::ClientId;
use ktsim::tlog::{prove_inclusion, ProofOfInclusion};

#[test]
fn eight_record_root_matches_oracle() {
    let dir = directory(8);
    let t = build(&dir, 3, 77);
    let want = oracle_root(&dir, 3, 77);
    assert_eq!(hex::encode(t.root_hash().0), hex::encode(want));
}

#[test]
fn roots_match_oracle_across_sizes_and_epochs() {
    for n in [0, 1, 2, 3, 5, 17, 64] {
        let dir = directory(n);
        for (epoch, seed) in [(0, 0), (1, 9), (41, 123456)] {
            assert_eq!(
                build(&dir, epoch, seed).root_hash().0,
                oracle_root(&dir, epoch, seed),
                "n={n}"
            );
        }
    }
}

#[test]
fn mutated_proofs_never_verify() {
    for n in [1usize, 8, 64, 1024] {
        assert_eq!(count_forgeries(n, 10_000, 2024 + n as u64), 0, "size {n}");
    }
}

#[test]
fn wire_size_tracks_depth() {
    let dir = directory(64);
    let tree = build(&dir, 0, 1);
    for (id, _) in &dir {
        let p = prove_inclusion(&tree, &ClientId::new(id)).unwrap();
        assert_eq!(p.wire_bytes(), 32 * (p.siblings.len() as u64 + 1));
        assert_eq!(ProofOfInclusion::decode(&p.encode()).unwrap(), p);
    }
}

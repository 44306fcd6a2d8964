//! Reference implementations shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};

use ktsim::crypto::{Digest, KeyPair};
use ktsim::id::ClientId;
use ktsim::tlog::{generate_str, prove_inclusion, verify_poi, MerkleTree, ProofOfInclusion, PublicKeyRecord, Side};

fn h(tag: u8, parts: &[&[u8]]) -> [u8; 32] {
    let mut s = Sha256::new();
    s.update([tag]);
    for p in parts {
        s.update(p);
    }
    s.finalize().into()
}

fn lp(b: &[u8]) -> Vec<u8> {
    let mut v = (b.len() as u32).to_be_bytes().to_vec();
    v.extend_from_slice(b);
    v
}

fn bits(d: &[u8; 32]) -> Vec<u8> {
    (0..256).map(|i| (d[i / 8] >> (7 - i % 8)) & 1).collect()
}

fn prefix_bytes(p: &[u8]) -> Vec<u8> {
    let mut packed = vec![0u8; p.len().div_ceil(8)];
    for (i, &b) in p.iter().enumerate() {
        packed[i / 8] |= b << (7 - i % 8);
    }
    let mut v = (p.len() as u64).to_be_bytes().to_vec();
    v.extend(lp(&packed));
    v
}

struct Rec {
    index: [u8; 32],
    bits: Vec<u8>,
    binding: [u8; 32],
    depth: usize,
}

/// Straight transcription of the construction: every position is derived
/// from all other records, not just sorted neighbours.
pub fn oracle_root(records: &[(String, Vec<u8>)], epoch: u64, seed: u64) -> [u8; 32] {
    let s = seed.to_be_bytes();
    let e = epoch.to_be_bytes();
    let mut recs: Vec<Rec> = records
        .iter()
        .map(|(id, key)| {
            let index = h(0x02, &[&lp(id.as_bytes())]);
            Rec {
                bits: bits(&index),
                index,
                binding: h(0x03, &[&lp(id.as_bytes()), &lp(key)]),
                depth: 0,
            }
        })
        .collect();
    let n = recs.len();
    for i in 0..n {
        let shared = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                recs[i]
                    .bits
                    .iter()
                    .zip(&recs[j].bits)
                    .take_while(|(a, b)| a == b)
                    .count()
            })
            .max()
            .unwrap_or(0);
        let unique = if n == 1 { 0 } else { shared + 1 };
        let span = unique.max(1).min(256 - unique).max(1) as u64;
        let draw = h(0x09, &[&s, &recs[i].index, &e]);
        let draw = u64::from_be_bytes(draw[..8].try_into().unwrap());
        recs[i].depth = unique + 1 + (draw % span) as usize;
    }
    fn node(recs: &[&Rec], prefix: &mut Vec<u8>, s: &[u8], e: &[u8]) -> [u8; 32] {
        let p = prefix_bytes(prefix);
        match recs {
            [] => h(0x06, &[s, &p, e]),
            [r] if r.depth == prefix.len() => {
                let nonce = h(0x00, &[s, &p, e]);
                h(0x04, &[&nonce, &r.index, &(r.depth as u64).to_be_bytes(), &r.binding])
            }
            _ => {
                let d = prefix.len();
                let (l, r): (Vec<&Rec>, Vec<&Rec>) = recs.iter().partition(|x| x.bits[d] == 0);
                prefix.push(0);
                let left = node(&l, prefix, s, e);
                *prefix.last_mut().unwrap() = 1;
                let right = node(&r, prefix, s, e);
                prefix.pop();
                let nonce = h(0x01, &[s, &p, e]);
                h(0x05, &[&nonce, &left, &right, &p, &(d as u64).to_be_bytes()])
            }
        }
    }
    let refs: Vec<&Rec> = recs.iter().collect();
    node(&refs, &mut Vec::new(), &s, &e)
}

pub fn directory(n: usize) -> Vec<(String, Vec<u8>)> {
    (0..n)
        .map(|i| {
            (
                ClientId::indexed(i).to_string(),
                (0..32).map(|b| (i * 31 + b) as u8).collect(),
            )
        })
        .collect()
}

pub fn build(dir: &[(String, Vec<u8>)], epoch: u64, seed: u64) -> MerkleTree {
    MerkleTree::build(
        dir.iter()
            .map(|(id, k)| PublicKeyRecord::new(ClientId::new(id), k.clone(), 0)),
        epoch,
        seed,
    )
    .unwrap()
}

fn flip(d: &mut Digest, rng: &mut ChaCha20Rng) {
    let i = rng.gen_range(0..256);
    d.0[i / 8] ^= 1 << (i % 8);
}

/// One random alteration of a genuine `(proof, client, key)` claim.
fn mutate(p: &mut ProofOfInclusion, id: &mut ClientId, key: &mut [u8], n: usize, rng: &mut ChaCha20Rng) {
    let depth = p.siblings.len();
    match rng.gen_range(0..10) {
        0 => flip(&mut p.leaf.nonce, rng),
        1 => flip(&mut p.leaf.index, rng),
        2 => flip(&mut p.siblings[rng.gen_range(0..depth)].hash, rng),
        3 => {
            let s = &mut p.siblings[rng.gen_range(0..depth)].side;
            *s = if *s == Side::Left { Side::Right } else { Side::Left };
        }
        4 => flip(&mut p.nonces[rng.gen_range(0..depth)], rng),
        5 => {
            let i = rng.gen_range(0..key.len());
            key[i] ^= 1 << rng.gen_range(0..8);
        }
        6 => {
            *id = ClientId::indexed(rng.gen_range(0..n + 5));
        }
        7 => {
            p.siblings.pop();
            p.nonces.pop();
            p.depth -= 1;
            p.leaf.depth -= 1;
        }
        8 => {
            p.siblings.push(p.siblings[0].clone());
            p.nonces.push(p.nonces[0]);
            p.depth += 1;
            p.leaf.depth += 1;
        }
        _ => {
            let i = rng.gen_range(0..depth);
            let j = rng.gen_range(0..depth);
            p.siblings.swap(i, j);
            if i == j || p.siblings[i] == p.siblings[j] {
                flip(&mut p.leaf.nonce, rng);
            }
        }
    }
}

/// Applies `mutations` random alterations to genuine proofs in a directory of
/// `n` records and counts the altered claims that still fold to the root.
pub fn count_forgeries(n: usize, mutations: usize, seed: u64) -> usize {
    let server = KeyPair::from_seed([5; 32]);
    let pk = server.verifying_key();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let dir = directory(n);
    let tree = build(&dir, 0, 99);
    let root = generate_str(&tree, None, &server, 0).unwrap();
    let mut forged = 0;
    for _ in 0..mutations {
        let i = rng.gen_range(0..n);
        let (id0, key0) = (ClientId::new(&dir[i].0), dir[i].1.clone());
        let genuine = prove_inclusion(&tree, &id0).unwrap();
        assert!(verify_poi(&root, &genuine, &id0, &key0, &pk));
        let (mut p, mut id, mut key) = (genuine.clone(), id0.clone(), key0.clone());
        mutate(&mut p, &mut id, &mut key, n, &mut rng);
        let changed = (p.clone(), id.clone(), key.clone()) != (genuine, id0, key0);
        if changed && p.compute_root(&id, &key) == Some(root.root_hash) {
            forged += 1;
        }
    }
    forged
}

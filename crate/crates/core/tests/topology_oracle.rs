//! Component diameters against all-pairs shortest paths.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use ktsim::simnet::topology::{graph_diameter, Diameter, Topology};

const INF: usize = usize::MAX / 4;

/// Floyd-Warshall over the alive subgraph; `None` when it is disconnected.
fn fw_diameter(t: &Topology, alive: &[bool]) -> Option<usize> {
    let n = t.len();
    let mut d = vec![vec![INF; n]; n];
    for a in (0..n).filter(|&a| alive[a]) {
        d[a][a] = 0;
        for b in t.neighbors(a).filter(|&b| alive[b]) {
            d[a][b] = 1;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    let live: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
    let mut best = 0;
    for &i in &live {
        for &j in &live {
            if d[i][j] >= INF {
                return None;
            }
            best = best.max(d[i][j]);
        }
    }
    Some(best)
}

#[test]
fn named_shapes() {
    for (t, want) in [
        (Topology::ring(10), 5),
        (Topology::star(101), 2),
        (Topology::complete(7), 1),
        (Topology::ring(7), 3),
    ] {
        let all = vec![true; t.len()];
        assert_eq!(fw_diameter(&t, &all), Some(want));
        assert_eq!(graph_diameter(&t, &all), Diameter::Connected(want));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn bfs_matches_floyd_warshall(seed in any::<u64>(), n in 1usize..24, p in 0.05f64..0.9, mask in any::<u32>()) {
        let t = Topology::gnp(n, p, &mut ChaCha20Rng::seed_from_u64(seed));
        let alive: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1 || i == 0).collect();
        let got = match graph_diameter(&t, &alive) {
            Diameter::Connected(d) => Some(d),
            Diameter::Disconnected => None,
        };
        prop_assert_eq!(got, fw_diameter(&t, &alive));
        for comp in t.components(&alive) {
            let only: Vec<bool> = (0..n).map(|i| comp.contains(&i)).collect();
            prop_assert_eq!(Some(t.component_diameter(&comp, &alive)), fw_diameter(&t, &only));
        }
    }
}

//! Coin-based binary agreement (BVAL / AUX / CONF rounds), terminated with
//! TERM messages so decided nodes can stop.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dag::{put_u32, put_u64, Committee, Digest, NodeId};

/// Perfect common coin: a pure function of its coordinates.
#[derive(Clone, Copy, Debug)]
pub struct CommonCoin {
    pub seed: u64,
}

impl CommonCoin {
    pub fn flip(&self, view: u64, slot: NodeId, round: u32) -> bool {
        let d = Digest::of("coin", |h| {
            put_u64(h, self.seed);
            put_u64(h, view);
            put_u32(h, slot.0);
            put_u32(h, round);
        });
        d.0[0] & 1 == 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AbaMessage {
    BVal { round: u32, value: bool },
    Aux { round: u32, value: bool },
    /// Bitmask of the sender's bin_values (bit 0 = false, bit 1 = true).
    Conf { round: u32, values: u8 },
    Term { value: bool },
}

fn bit(b: bool) -> u8 {
    1 << (b as u8)
}

#[derive(Default)]
struct RoundState {
    bval_from: [BTreeSet<NodeId>; 2],
    bval_sent: [bool; 2],
    bin_values: u8,
    aux_from: BTreeMap<NodeId, bool>,
    aux_sent: bool,
    conf_from: BTreeMap<NodeId, u8>,
    conf_sent: bool,
}

pub struct Aba {
    committee: Committee,
    coin: CommonCoin,
    view: u64,
    slot: NodeId,
    est: Option<bool>,
    round: u32,
    rounds: BTreeMap<u32, RoundState>,
    decided: Option<bool>,
    term_from: [BTreeSet<NodeId>; 2],
    term_sent: bool,
    terminated: bool,
}

impl Aba {
    pub fn new(committee: Committee, coin: CommonCoin, view: u64, slot: NodeId) -> Self {
        Self {
            committee,
            coin,
            view,
            slot,
            est: None,
            round: 0,
            rounds: BTreeMap::new(),
            decided: None,
            term_from: Default::default(),
            term_sent: false,
            terminated: false,
        }
    }

    pub fn has_input(&self) -> bool {
        self.est.is_some()
    }

    pub fn decided(&self) -> Option<bool> {
        self.decided
    }

    pub fn terminated(&self) -> bool {
        self.terminated
    }

    /// Rounds this instance has entered.
    pub fn rounds_used(&self) -> u32 {
        self.round + 1
    }

    pub fn input(&mut self, value: bool) -> Vec<AbaMessage> {
        if self.est.is_some() || self.terminated {
            return Vec::new();
        }
        self.est = Some(value);
        let mut out = Vec::new();
        self.send_bval(self.round, value, &mut out);
        self.progress(&mut out);
        out
    }

    fn send_bval(&mut self, round: u32, value: bool, out: &mut Vec<AbaMessage>) {
        let st = self.rounds.entry(round).or_default();
        if !st.bval_sent[value as usize] {
            st.bval_sent[value as usize] = true;
            out.push(AbaMessage::BVal { round, value });
        }
    }

    fn decide(&mut self, value: bool, out: &mut Vec<AbaMessage>) {
        if self.decided.is_none() {
            self.decided = Some(value);
        }
        if !self.term_sent {
            self.term_sent = true;
            out.push(AbaMessage::Term { value });
        }
    }

    pub fn handle(&mut self, from: NodeId, msg: AbaMessage) -> Vec<AbaMessage> {
        let mut out = Vec::new();
        if self.terminated || !self.committee.contains(from) {
            return out;
        }
        let (v, q) = (self.committee.validity(), self.committee.quorum());
        match msg {
            AbaMessage::Term { value } => {
                let set = &mut self.term_from[value as usize];
                set.insert(from);
                let c = set.len();
                if c >= v {
                    self.decide(value, &mut out);
                }
                if c >= q {
                    self.terminated = true;
                    return out;
                }
            }
            AbaMessage::BVal { round, value } => {
                if round < self.round {
                    return out;
                }
                let st = self.rounds.entry(round).or_default();
                st.bval_from[value as usize].insert(from);
                let c = st.bval_from[value as usize].len();
                // relay only once we have joined the round ourselves
                if c >= v && self.est.is_some() && round <= self.round {
                    self.send_bval(round, value, &mut out);
                }
                let st = self.rounds.get_mut(&round).expect("present");
                if c >= q && st.bin_values & bit(value) == 0 {
                    st.bin_values |= bit(value);
                }
            }
            AbaMessage::Aux { round, value } => {
                if round < self.round {
                    return out;
                }
                self.rounds.entry(round).or_default().aux_from.entry(from).or_insert(value);
            }
            AbaMessage::Conf { round, values } => {
                if round < self.round || values == 0 || values > 3 {
                    return out;
                }
                self.rounds.entry(round).or_default().conf_from.entry(from).or_insert(values);
            }
        }
        self.progress(&mut out);
        out
    }

    fn progress(&mut self, out: &mut Vec<AbaMessage>) {
        let (v, q) = (self.committee.validity(), self.committee.quorum());
        while !self.terminated {
            if self.est.is_none() {
                return;
            }
            let r = self.round;
            let st = self.rounds.entry(r).or_default();
            // buffered BVALs may now warrant a relay
            for b in [false, true] {
                if st.bval_from[b as usize].len() >= v && !st.bval_sent[b as usize] {
                    st.bval_sent[b as usize] = true;
                    out.push(AbaMessage::BVal { round: r, value: b });
                }
                if st.bval_from[b as usize].len() >= q {
                    st.bin_values |= bit(b);
                }
            }
            if st.bin_values == 0 {
                return;
            }
            if !st.aux_sent {
                st.aux_sent = true;
                let b = st.bin_values & bit(true) != 0 && st.bin_values & bit(false) == 0;
                out.push(AbaMessage::Aux { round: r, value: b });
            }
            let bin = st.bin_values;
            let aux_ok = st.aux_from.values().filter(|&&b| bin & bit(b) != 0).count();
            if aux_ok < q {
                return;
            }
            if !st.conf_sent {
                st.conf_sent = true;
                out.push(AbaMessage::Conf { round: r, values: bin });
            }
            let mut vals = 0u8;
            let mut n_conf = 0;
            for &m in st.conf_from.values() {
                if m & !bin == 0 {
                    n_conf += 1;
                    vals |= m;
                }
            }
            if n_conf < q {
                return;
            }
            let s = self.coin.flip(self.view, self.slot, r);
            let next = if vals == bit(true) || vals == bit(false) {
                let b = vals == bit(true);
                if b == s {
                    self.decide(b, out);
                }
                b
            } else {
                s
            };
            self.est = Some(next);
            self.round = r + 1;
            self.rounds.remove(&r);
            self.send_bval(self.round, next, out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random-order delivery among n=4 nodes; `silent` nodes never act.
    fn run(inputs: [Option<bool>; 4], seed: u64) -> Vec<Option<bool>> {
        let c = Committee::new(4, 1).unwrap();
        let coin = CommonCoin { seed };
        let mut abas: Vec<Aba> = (0..4).map(|_| Aba::new(c, coin, 0, NodeId(0))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool: Vec<(NodeId, NodeId, AbaMessage)> = Vec::new();
        for (i, inp) in inputs.iter().enumerate() {
            if let Some(b) = inp {
                for m in abas[i].input(*b) {
                    for t in 0..4 {
                        pool.push((NodeId(i as u32), NodeId(t), m));
                    }
                }
            }
        }
        let mut steps = 0;
        while !pool.is_empty() && steps < 200_000 {
            steps += 1;
            let k = rng.gen_range(0..pool.len());
            let (from, to, m) = pool.swap_remove(k);
            if inputs[to.index()].is_none() {
                continue;
            }
            for out in abas[to.index()].handle(from, m) {
                let mut ts: Vec<u32> = (0..4).collect();
                ts.shuffle(&mut rng);
                for t in ts {
                    pool.push((to, NodeId(t), out));
                }
            }
        }
        abas.iter().map(|a| a.decided()).collect()
    }

    #[test]
    fn unanimous_one() {
        for s in 0..20 {
            let d = run([Some(true); 4], s);
            assert!(d.iter().all(|x| *x == Some(true)), "seed {s}: {d:?}");
        }
    }

    #[test]
    fn unanimous_zero() {
        for s in 0..20 {
            let d = run([Some(false); 4], s);
            assert!(d.iter().all(|x| *x == Some(false)), "seed {s}: {d:?}");
        }
    }

    #[test]
    fn mixed_inputs_agree() {
        for s in 0..200 {
            let d = run([Some(true), Some(false), Some(true), Some(false)], s);
            assert!(d[0].is_some());
            assert!(d.iter().all(|x| *x == d[0]), "seed {s}: {d:?}");
        }
    }

    #[test]
    fn one_silent_node_still_terminates() {
        for s in 0..100 {
            let d = run([Some(true), Some(false), None, Some(false)], s);
            let live: Vec<_> = [0, 1, 3].iter().map(|&i| d[i]).collect();
            assert!(live[0].is_some(), "seed {s}");
            assert!(live.iter().all(|x| *x == live[0]), "seed {s}: {d:?}");
        }
    }

    #[test]
    fn coin_is_deterministic() {
        let c = CommonCoin { seed: 5 };
        assert_eq!(c.flip(1, NodeId(2), 3), c.flip(1, NodeId(2), 3));
        let ones = (0..256).filter(|&r| c.flip(0, NodeId(0), r)).count();
        assert!((80..180).contains(&ones));
    }
}

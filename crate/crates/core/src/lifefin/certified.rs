//! Folding a decided fallback back into the certified DAG.

use std::sync::Arc;

use crate::dag::{Vertex, VertexPtr};
use crate::node::{CommitKind, Ctx, MetricEvent};
use crate::sailfish::Sailfish;
use crate::simnet::MsgClass;

use super::select_leader_block;

impl Sailfish {
    /// Finalize the decided fallback once every decided vertex is connected.
    /// Returns true if it made progress (fetched state or finished).
    pub(crate) fn try_finalize(&mut self, ctx: &mut Ctx<'_>) -> bool {
        let Some(blocks) = self.core.fb.decision().map(|b| b.to_vec()) else {
            return false;
        };
        let mut progress = false;
        let mut waiting = Vec::new();
        for b in &blocks {
            let d = b.vertex.digest();
            if !self.core.store.contains(&d) {
                if self.side.contains_key(&d) {
                    progress |= self.obtain(ctx, vec![b.vertex.reference()]);
                } else {
                    // certified by a quorum, hence the RBC-delivered version
                    let (_, ins) = self.core.admit(ctx, b.vertex.clone(), false, true);
                    self.on_connected(ctx, &ins.connected);
                    progress = true;
                }
            }
            if !self.core.store.is_connected(&d) {
                waiting.push(b.vertex.reference());
            }
        }
        if !waiting.is_empty() {
            let missing = super::history_wants(&self.core.store, &waiting);
            progress |= self.obtain(ctx, missing);
            return progress;
        }

        let r_fb = blocks.iter().map(|b| b.vertex.round()).max().expect("non-empty decision");
        let predefined = self.leaders.predefined(r_fb);
        let (sb_l, is_predefined) = select_leader_block(&blocks, predefined);
        if !is_predefined && r_fb > 1 && r_fb - 1 > self.committed_round {
            let prev_leader = self.leaders.of(r_fb - 1);
            let pred = blocks
                .iter()
                .flat_map(|b| b.vertex.references())
                .find(|r| r.round == r_fb - 1 && r.creator == prev_leader)
                .and_then(|r| self.core.store.get(&r.digest).cloned());
            if let Some(p) = pred {
                self.commit_leader(ctx, &p, CommitKind::Fallback);
            }
        }
        self.leaders.reassign(r_fb, sb_l.creator);
        ctx.emit(MetricEvent::FallbackLeader {
            round: r_fb,
            creator: sb_l.creator,
            predefined: is_predefined,
        });
        if r_fb > self.committed_round {
            self.commit_leader(ctx, &sb_l.vertex, CommitKind::Fallback);
        }
        self.fb_rounds.insert(r_fb);
        self.floor = self.floor.max(r_fb + 1);
        self.core.fetcher.clear();

        // side-buffered vertices: stale ones go, resumption ones are delivered
        let side = std::mem::take(&mut self.side);
        self.side_bytes = 0;
        let mut resumed: Vec<VertexPtr> = Vec::new();
        for v in side.into_values() {
            ctx.mem.refund(v.size() as u64, MsgClass::Fallback);
            if v.round() > self.floor {
                resumed.push(v);
            }
        }
        let floor = self.floor;
        self.rbc_retain_above(floor);

        let buffered = self.core.fb.finish(ctx, r_fb);
        let next = r_fb + 2;
        let me = self.core.me;
        let skip = self.core.behavior.skips_own_leader_round() && self.leaders.of(next) == me;
        if !skip && !ctx.mem.is_exhausted() {
            let refs = blocks.iter().map(|b| b.vertex.reference()).collect();
            let payload = self.core.tx.take(ctx.now);
            let v = Arc::new(Vertex::new(next, me, payload, refs, None));
            self.disseminate(ctx, v);
        }
        self.enter(ctx, next);
        resumed.sort_by_key(|v| (v.round(), v.creator()));
        for v in resumed {
            let (_, ins) = self.core.admit(ctx, v, false, false);
            self.on_connected(ctx, &ins.connected);
        }
        self.revalidate_deferred();
        self.redispatch(ctx, buffered);
        true
    }
}

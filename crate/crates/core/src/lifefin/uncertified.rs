//! Folding a decided fallback back into the uncertified DAG.

use std::sync::Arc;

use crate::dag::Vertex;
use crate::mysticeti::Mysticeti;
use crate::node::{Ctx, MetricEvent};
use crate::wire::Message;

use super::select_leader_block;

impl Mysticeti {
    /// Finalize once every decided vertex has its history here. Returns
    /// true when the fallback finished.
    pub(crate) fn try_finalize(&mut self, ctx: &mut Ctx<'_>) -> bool {
        let Some(blocks) = self.core.fb.decision().map(|b| b.to_vec()) else {
            return false;
        };
        let mut complete = true;
        for b in &blocks {
            let d = b.vertex.digest();
            if !self.core.store.contains(&d) {
                self.accept(ctx, b.vertex.clone(), true, Some(b.creator));
            }
            if !self.core.store.is_connected(&d) {
                complete = false;
                let missing = self.core.store.absent_ancestors(&d);
                self.core.want(ctx, &missing, true, Some(b.creator));
            }
        }
        if !complete {
            return false;
        }

        let r_fb = blocks.iter().map(|b| b.vertex.round()).max().expect("non-empty decision");
        let (sb_l, predefined) = select_leader_block(&blocks, self.leaders.predefined(r_fb));
        self.leaders.reassign(r_fb, sb_l.creator);
        ctx.emit(MetricEvent::FallbackLeader {
            round: r_fb,
            creator: sb_l.creator,
            predefined,
        });
        if r_fb > self.decider.finalized() {
            let tops = blocks.iter().filter(|b| b.vertex.round() == r_fb).map(|b| b.vertex.clone()).collect();
            self.decider.fix(r_fb, sb_l.vertex.clone(), tops);
        }
        self.fb_rounds.insert(r_fb);
        self.core.fetcher.clear();
        let buffered = self.core.fb.finish(ctx, r_fb);

        let next = r_fb + 2;
        let me = self.core.me;
        let skip = self.core.behavior.skips_own_leader_round() && self.leaders.of(next) == me;
        if !skip && !ctx.mem.is_exhausted() {
            let refs = blocks.iter().map(|b| b.vertex.reference()).collect();
            let payload = self.core.tx.take(ctx.now);
            self.disseminate(ctx, Arc::new(Vertex::new(next, me, payload, refs, None)));
        }
        self.enter(ctx, next);
        let early: Vec<_> = self.take_early().into_iter().map(|(f, v)| (f, Message::Vertex(v))).collect();
        self.redispatch(ctx, early);
        self.redispatch(ctx, buffered);
        true
    }
}

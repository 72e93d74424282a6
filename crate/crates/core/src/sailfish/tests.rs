use super::*;

fn c4() -> Committee {
    Committee::new(4, 1).unwrap()
}

fn genesis_refs(store: &DagStore, skip: Option<u32>) -> Vec<VertexRef> {
    (0..4)
        .filter(|i| Some(*i) != skip)
        .map(|i| store.slot(1, NodeId(i)).unwrap().reference())
        .collect()
}

fn check(store: &DagStore, fbr: &BTreeSet<Round>, v: &Vertex) -> Validity {
    let reg = KeyRegistry::new(1, c4());
    let id = VertexSlot {
        round: v.round(),
        creator: v.creator(),
    };
    validate(|d| store.is_connected(d), &reg, c4(), fbr, id, v)
}

#[test]
fn leader_without_predecessor_or_certificate_is_invalid() {
    let store = DagStore::with_genesis(c4());
    let none = BTreeSet::new();
    // round 2 is led by node 2, round 1 by node 1
    let ok = Vertex::new(2, NodeId(2), vec![], genesis_refs(&store, Some(0)), None);
    assert_eq!(check(&store, &none, &ok), Validity::Valid);
    let bad = Vertex::new(2, NodeId(2), vec![], genesis_refs(&store, Some(1)), None);
    assert_eq!(check(&store, &none, &bad), Validity::Invalid);
    // non-leaders may skip the leader
    let fine = Vertex::new(2, NodeId(3), vec![], genesis_refs(&store, Some(1)), None);
    assert_eq!(check(&store, &none, &fine), Validity::Valid);
}

#[test]
fn no_vote_certificate_excuses_missing_predecessor() {
    let store = DagStore::with_genesis(c4());
    let reg = KeyRegistry::new(1, c4());
    let sigs: Vec<_> = (0..3)
        .map(|i| reg.signing_key(NodeId(i)).sign(NoVoteCertificate::message(1)))
        .collect();
    let cert = form_certificate(&reg, &sigs).unwrap();
    let v = Vertex::new(
        2,
        NodeId(2),
        vec![],
        genesis_refs(&store, Some(1)),
        Some(NoVoteCertificate { round: 1, cert }),
    );
    assert_eq!(check(&store, &BTreeSet::new(), &v), Validity::Valid);
}

#[test]
fn short_or_duplicate_refs_are_invalid() {
    let store = DagStore::with_genesis(c4());
    let mut refs = genesis_refs(&store, None);
    refs.truncate(2);
    let v = Vertex::new(2, NodeId(3), vec![], refs.clone(), None);
    assert_eq!(check(&store, &BTreeSet::new(), &v), Validity::Invalid);
    refs.push(refs[0]);
    let v = Vertex::new(2, NodeId(3), vec![], refs, None);
    assert_eq!(check(&store, &BTreeSet::new(), &v), Validity::Invalid);
}

#[test]
fn resumption_vertex_waits_for_the_fallback() {
    let store = DagStore::with_genesis(c4());
    let v = Vertex::new(3, NodeId(3), vec![], genesis_refs(&store, None), None);
    assert_eq!(check(&store, &BTreeSet::new(), &v), Validity::Defer);
    assert_eq!(check(&store, &BTreeSet::from([1]), &v), Validity::Valid);
}

#[test]
fn unknown_parent_defers() {
    let store = DagStore::with_genesis(c4());
    let mut refs = genesis_refs(&store, None);
    refs[3].digest = Digest([9; 32]);
    let v = Vertex::new(2, NodeId(3), vec![], refs, None);
    assert_eq!(check(&store, &BTreeSet::new(), &v), Validity::Defer);
}

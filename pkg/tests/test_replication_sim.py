"""Consensus behavior under the deterministic simulation: optimistic
acknowledgement, signature-gated commit, elections, statuses, durability."""

import random

import pytest

from lskv.raft import LEADER, RaftConfig
from lskv.sim import SIM_CONFIG, SimCluster, run_script
from lskv.types import NotLeader, TxID, TxStatus

MANUAL_SIG = RaftConfig(
    election_timeout=(0.05, 0.10),
    heartbeat_interval=0.02,
    signature_interval=1e9,
    batch_count=64,
    batch_time=0.002,
)


def cluster_with_leader(n=3, seed=0, config=None, with_ledger=False):
    cluster = SimCluster(n=n, seed=seed, config=config, with_ledger=with_ledger)
    leader = cluster.wait_for_leader()
    assert leader is not None
    if n > 1:
        # let startup election churn settle: a couple of heartbeat rounds
        cluster.run_for(0.25)
        leader = cluster.wait_for_leader()
    return cluster, leader


class TestLeaderAssign:
    def test_consecutive_revisions_in_leader_term(self):
        # a fresh leader elected at term 2 still hands out revisions 1, 2, 3
        cluster = SimCluster(n=1, seed=3)
        cluster.nodes["n0"].core.current_term = 1  # a failed election happened
        leader = cluster.wait_for_leader()
        assert leader.core.current_term == 2
        ids = [cluster.put(b"k%d" % i, b"v")[1] for i in range(3)]
        assert [t.as_list() for t in ids] == [[2, 1], [2, 2], [2, 3]]

    def test_not_leader_rejected_with_hint(self):
        cluster, leader = cluster_with_leader(seed=1)
        cluster.run_for(0.2)  # followers learn the leader from heartbeats
        leader = cluster.leader()
        follower = next(nid for nid in cluster.node_ids if nid != leader.node_id)
        with pytest.raises(NotLeader) as err:
            cluster.put(b"k", b"v", node_id=follower)
        assert err.value.leader == leader.node_id

    def test_ack_precedes_commit(self):
        cluster, leader = cluster_with_leader(seed=2, config=MANUAL_SIG)
        _, txid = cluster.put(b"k", b"v")
        assert leader.core.tx_status(txid) == TxStatus.PENDING

    def test_reads_never_consume_revisions(self):
        cluster, leader = cluster_with_leader(seed=2)
        cluster.put(b"k", b"v")
        before = leader.core.next_revision
        cluster.client("range", {"key": "aw=="})
        assert leader.core.next_revision == before


class TestCommitAdvance:
    def test_replicated_without_signature_stays_pending(self):
        cluster, leader = cluster_with_leader(seed=4, config=MANUAL_SIG)
        _, txid = cluster.put(b"k", b"v")
        cluster.run_for(0.3)  # replicates everywhere, no signature possible
        assert all(s == TxStatus.PENDING for s in cluster.statuses(txid).values())

    def test_signature_acked_by_one_follower_commits(self):
        cluster, leader = cluster_with_leader(seed=5, config=MANUAL_SIG)
        ids = [cluster.put(b"k%d" % i, b"v")[1] for i in range(5)]
        cluster.run_for(0.2)
        # cut one follower off; the other's ack plus the leader is a majority
        followers = [nid for nid in cluster.node_ids if nid != leader.node_id]
        cluster.partition([{leader.node_id, followers[0]}, {followers[1]}])
        leader.core._emit_signature(cluster.now)
        cluster._drain(leader)
        cluster.run_for(0.3)
        assert leader.core.committed_txid == ids[-1]
        assert leader.core.tx_status(ids[-1]) == TxStatus.COMMITTED
        cluster.heal()

    def test_single_node_commits_each_signature(self):
        cluster, leader = cluster_with_leader(n=1, seed=6, config=MANUAL_SIG)
        _, t1 = cluster.put(b"a", b"1")
        leader.core._emit_signature(cluster.now)
        assert leader.core.committed_txid == t1
        _, t2 = cluster.put(b"b", b"2")
        assert leader.core.committed_txid == t1
        leader.core._emit_signature(cluster.now)
        assert leader.core.committed_txid == t2

    def test_commit_monotone(self):
        cluster, leader = cluster_with_leader(seed=7)
        seen = 0
        for i in range(6):
            cluster.put(b"k%d" % i, b"v")
            cluster.run_for(0.2)
            now = leader.core.committed_txid.revision
            assert now >= seen
            seen = now


class TestElections:
    def test_discarded_suffix_becomes_invalid(self):
        cluster, leader = cluster_with_leader(seed=8)
        _, committed = cluster.put(b"a", b"1")
        cluster.run_for(0.5)
        assert leader.core.tx_status(committed) == TxStatus.COMMITTED
        old_term = leader.core.current_term
        others = {nid for nid in cluster.node_ids if nid != leader.node_id}
        cluster.partition([{leader.node_id}, others])
        _, lost1 = cluster.put(b"b", b"2", node_id=leader.node_id)
        _, lost2 = cluster.put(b"c", b"3", node_id=leader.node_id)
        cluster.run_until(
            lambda: cluster.leader() is not None
            and cluster.leader().core.current_term > old_term,
            5.0,
        )
        cluster.heal()
        new_leader = cluster.leader()
        _, fresh = cluster.put(b"d", b"4")
        cluster.run_for(1.0)
        # the lost suffix reused those revisions in the new term
        assert fresh.revision == lost1.revision or fresh.revision > lost1.revision
        for txid in (lost1, lost2):
            statuses = cluster.statuses(txid)
            assert all(s == TxStatus.INVALID for s in statuses.values()), statuses
        assert all(s == TxStatus.COMMITTED for s in cluster.statuses(committed).values())
        assert all(s == TxStatus.COMMITTED for s in cluster.statuses(fresh).values())

    def test_election_without_conflict_discards_nothing(self):
        cluster, leader = cluster_with_leader(seed=9)
        _, txid = cluster.put(b"a", b"1")
        cluster.run_for(0.5)
        old_term = leader.core.current_term
        others = {nid for nid in cluster.node_ids if nid != leader.node_id}
        cluster.partition([{leader.node_id}, others])
        cluster.run_until(
            lambda: cluster.leader() is not None
            and cluster.leader().core.current_term > old_term,
            5.0,
        )
        cluster.heal()
        cluster.run_for(0.5)
        assert all(s == TxStatus.COMMITTED for s in cluster.statuses(txid).values())
        history = cluster.leader().core.term_history()
        assert [h.term for h in history][0] == old_term
        assert history[-1].term > old_term

    def test_term_skip_after_failed_candidacy(self):
        cluster, leader = cluster_with_leader(seed=10)
        cluster.put(b"a", b"1")
        cluster.run_for(0.5)
        lone = next(nid for nid in cluster.node_ids if nid != leader.node_id)
        others = {nid for nid in cluster.node_ids if nid != lone}
        cluster.partition([{lone}, others])
        cluster.run_until(lambda: cluster.nodes[lone].core.current_term >= 3, 5.0)
        cluster.heal()
        # the lone candidate's inflated term forces a fresh election beyond it
        cluster.run_until(
            lambda: cluster.leader() is not None
            and cluster.leader().core.current_term >= 3
            and cluster.leader().role == LEADER,
            5.0,
        )
        cluster.put(b"b", b"2")
        cluster.run_for(0.5)
        terms = [h.term for h in cluster.leader().core.term_history()]
        assert terms[0] == 1
        assert terms == sorted(terms)
        skipped = set(range(1, terms[-1] + 1)) - set(terms)
        assert skipped, "expected at least one skipped term"

    def test_history_revisions_strictly_increase_with_traffic(self):
        cluster, leader = cluster_with_leader(seed=11)
        for round_no in range(3):
            cluster.put(b"k%d" % round_no, b"v")
            cluster.run_for(0.4)
            current = cluster.leader()
            term = current.core.current_term
            others = {nid for nid in cluster.node_ids if nid != current.node_id}
            cluster.partition([{current.node_id}, others])
            cluster.run_until(
                lambda: cluster.leader() is not None
                and cluster.leader().core.current_term > term,
                5.0,
            )
            cluster.heal()
            cluster.run_for(0.2)
        cluster.put(b"final", b"v")
        cluster.run_for(0.8)
        history = cluster.leader().core.term_history()
        assert len(history) >= 3
        assert [h.term for h in history] == sorted(h.term for h in history)
        revisions = [h.revision for h in history]
        assert revisions == sorted(revisions)


class TestTxStatus:
    def make_two_term_cluster(self, seed=12):
        """Five committed revisions in one term, then five more in a later one."""
        cluster, leader = cluster_with_leader(seed=seed)
        first_ids = [cluster.put(b"t1-%d" % i, b"v")[1] for i in range(5)]
        cluster.run_for(0.6)
        term1 = first_ids[-1].term
        leader = cluster.leader()
        others = {nid for nid in cluster.node_ids if nid != leader.node_id}
        cluster.partition([{leader.node_id}, others])
        cluster.run_until(
            lambda: cluster.leader() is not None
            and cluster.leader().core.current_term > leader.core.current_term,
            5.0,
        )
        cluster.heal()
        cluster.run_for(0.3)
        second_ids = [cluster.put(b"t2-%d" % i, b"v")[1] for i in range(5)]
        cluster.run_for(0.8)
        new_leader = cluster.leader()
        term2 = second_ids[-1].term
        assert term2 > term1
        assert second_ids[-1].revision == 10
        return cluster, new_leader, term1, term2

    def test_committed_matching_term(self):
        cluster, leader, term1, term2 = self.make_two_term_cluster()
        assert leader.core.tx_status(TxID(term1, 3)) == TxStatus.COMMITTED
        assert leader.core.tx_status(TxID(term2, 8)) == TxStatus.COMMITTED

    def test_covered_revision_with_wrong_term_invalid(self):
        cluster, leader, term1, term2 = self.make_two_term_cluster()
        assert leader.core.tx_status(TxID(term1, 8)) == TxStatus.INVALID
        assert leader.core.tx_status(TxID(term2, 3)) == TxStatus.INVALID

    def test_unknown_beyond_log(self):
        cluster, leader, term1, term2 = self.make_two_term_cluster()
        assert leader.core.tx_status(TxID(term2 + 3, 40)) == TxStatus.UNKNOWN

    def test_genesis_is_committed(self):
        cluster, leader = cluster_with_leader(seed=13)
        assert leader.core.tx_status(TxID(0, 0)) == TxStatus.COMMITTED
        assert leader.core.tx_status(TxID(2, 0)) == TxStatus.INVALID


class TestDurability:
    def test_committed_survives_leader_crash(self):
        cluster, leader = cluster_with_leader(seed=14, with_ledger=True)
        _, txid = cluster.put(b"a", b"1")
        cluster.run_for(0.6)
        assert leader.core.tx_status(txid) == TxStatus.COMMITTED
        cluster.crash(leader.node_id)
        cluster.run_until(
            lambda: cluster.leader() is not None and cluster.leader().alive, 5.0
        )
        new_leader = cluster.leader()
        assert new_leader.node_id != leader.node_id
        cluster.run_for(0.5)
        assert new_leader.core.tx_status(txid) == TxStatus.COMMITTED
        result, _ = cluster.client("range", {"key": "YQ=="})
        assert result["count"] == 1

    def test_restarted_node_catches_up_and_serves(self):
        cluster, leader = cluster_with_leader(seed=15, with_ledger=True)
        _, txid = cluster.put(b"a", b"1")
        cluster.run_for(0.6)
        victim = next(nid for nid in cluster.node_ids if nid != leader.node_id)
        cluster.crash(victim)
        _, txid2 = cluster.put(b"b", b"2")
        cluster.run_for(0.6)
        cluster.restart(victim)
        cluster.run_for(1.0)
        node = cluster.nodes[victim]
        assert node.core.tx_status(txid) == TxStatus.COMMITTED
        assert node.core.tx_status(txid2) == TxStatus.COMMITTED
        assert not node.core.voter  # amnesia restart never votes again

    def test_acked_uncommitted_lost_on_leader_crash(self):
        cluster, leader = cluster_with_leader(seed=16, config=MANUAL_SIG)
        _, base = cluster.put(b"a", b"1")
        cluster.run_for(0.3)
        leader.core._emit_signature(cluster.now)
        cluster._drain(leader)
        cluster.run_for(0.3)
        # isolate, ack a write that never replicates, crash
        others = {nid for nid in cluster.node_ids if nid != leader.node_id}
        cluster.partition([{leader.node_id}, others])
        _, doomed = cluster.put(b"b", b"2", node_id=leader.node_id)
        cluster.crash(leader.node_id)
        cluster.heal()
        cluster.run_until(
            lambda: cluster.leader() is not None and cluster.leader().alive, 5.0
        )
        new_leader = cluster.leader()
        cluster.put(b"c", b"3")
        new_leader.core._emit_signature(cluster.now)
        cluster._drain(new_leader)
        cluster.run_for(0.5)
        assert new_leader.core.tx_status(doomed) == TxStatus.INVALID
        assert new_leader.core.tx_status(base) == TxStatus.COMMITTED


class TestDeterminism:
    def test_same_seed_same_trace(self):
        script = {
            "nodes": 3,
            "duration": 6.0,
            "events": [
                {"at": 1.0, "kind": "put", "key": "a", "value": "1"},
                {"at": 2.0, "kind": "depose"},
                {"at": 3.0, "kind": "put", "key": "b", "value": "2"},
                {"at": 4.0, "kind": "partition", "groups": [["n0"], ["n1", "n2"]]},
                {"at": 5.0, "kind": "heal"},
            ],
        }
        first = run_script(31, script)
        second = run_script(31, script)
        assert first.cluster.trace_digest() == second.cluster.trace_digest()
        third = run_script(32, script)
        assert third.cluster.trace_digest() != first.cluster.trace_digest()

    def test_script_with_crash_and_restart(self):
        script = {
            "nodes": 3,
            "duration": 8.0,
            "ledger": True,
            "events": [
                {"at": 1.0, "kind": "put", "key": "a", "value": "1"},
                {"at": 2.0, "kind": "crash", "node": "n1"},
                {"at": 3.0, "kind": "put", "key": "b", "value": "2"},
                {"at": 4.0, "kind": "restart", "node": "n1"},
                {"at": 5.0, "kind": "put", "key": "c", "value": "3"},
            ],
        }
        result = run_script(33, script)
        cluster = result.cluster
        assert not result.errors
        assert len(result.acked) == 3
        for txid, _ in result.acked:
            statuses = cluster.statuses(txid)
            assert all(s == TxStatus.COMMITTED for s in statuses.values()), statuses


def random_schedule_checks(seed: int, n_nodes: int, duration: float = 12.0):
    """One randomized fault schedule with continuous safety checking.

    Returns sampled status transitions so callers can also assert
    monotonicity in bulk.
    """
    rng = random.Random(f"sched:{seed}")
    cluster = SimCluster(n=n_nodes, seed=seed, with_ledger=rng.random() < 0.5)
    cluster.wait_for_leader()
    f = (n_nodes - 1) // 2
    crashed_ever = set()
    down = set()
    observed = {}  # (node incarnation, txid) -> last status
    incarnation = {nid: 0 for nid in cluster.node_ids}
    ever_committed = set()
    next_fault = cluster.now + rng.uniform(1.0, 2.0)
    next_put = cluster.now + rng.uniform(0.05, 0.2)
    next_sample = cluster.now
    end = cluster.now + duration

    def sample():
        for txid, _ in cluster.acked:
            for nid, node in cluster.nodes.items():
                if not node.alive:
                    continue
                status = node.core.tx_status(txid)
                key = (nid, incarnation[nid], txid)
                prior = observed.get(key)
                if prior is not None and prior.terminal and status != prior:
                    raise AssertionError(
                        f"seed {seed}: {nid} regressed {txid} from {prior} to {status}"
                    )
                if prior == TxStatus.PENDING and status == TxStatus.UNKNOWN:
                    raise AssertionError(f"seed {seed}: {nid} forgot pending {txid}")
                observed[key] = status
                if status == TxStatus.COMMITTED:
                    ever_committed.add(txid)

    while cluster.now < end:
        cluster.step(min(next_put, next_fault, next_sample, end))
        if cluster.now >= next_put:
            next_put = cluster.now + rng.uniform(0.05, 0.25)
            leader = cluster.leader()
            if leader is not None:
                try:
                    cluster.put(b"key%d" % rng.randrange(20), b"v%d" % rng.randrange(1000))
                except Exception:
                    pass
        if cluster.now >= next_sample:
            next_sample = cluster.now + 0.25
            sample()
        if cluster.now >= next_fault:
            next_fault = cluster.now + rng.uniform(1.0, 2.5)
            choice = rng.random()
            if choice < 0.3 and cluster.groups is None:
                ids = list(cluster.node_ids)
                rng.shuffle(ids)
                cut = rng.randrange(1, len(ids))
                cluster.partition([set(ids[:cut]), set(ids[cut:])])
            elif choice < 0.5:
                cluster.heal()
            elif choice < 0.7:
                candidates = [n for n in cluster.node_ids if n not in down]
                can_crash = [n for n in candidates if n in crashed_ever or len(crashed_ever) < f]
                if can_crash and len(down) < f:
                    victim = rng.choice(can_crash)
                    crashed_ever.add(victim)
                    down.add(victim)
                    cluster.crash(victim)
            elif down:
                victim = rng.choice(sorted(down))
                down.discard(victim)
                incarnation[victim] += 1
                cluster.restart(victim)

    # settle: heal, restart everyone, let a leader commit the tail
    cluster.heal()
    for victim in sorted(down):
        incarnation[victim] += 1
        cluster.restart(victim)
    cluster.run_until(lambda: cluster.leader() is not None, 10.0)
    settle_leader = cluster.leader()
    assert settle_leader is not None, f"seed {seed}: no leader after heal"
    try:
        cluster.put(b"settle", b"1")
    except Exception:
        pass
    cluster.run_for(2.0)
    sample()

    # agreement: no two nodes disagree on the term of a committed revision
    alive = [n for n in cluster.nodes.values() if n.alive]
    floor = min(n.core.committed_txid.revision for n in alive)
    for revision in range(1, floor + 1):
        terms = set()
        for node in alive:
            pos = node.core.rev_index.get(revision)
            assert pos is not None, f"seed {seed}: {node.node_id} missing committed rev {revision}"
            terms.add(node.core.log[pos]["term"])
        assert len(terms) == 1, f"seed {seed}: term disagreement at revision {revision}: {terms}"

    # every acked transaction resolves terminally after the settle window
    unresolved = []
    for txid, _ in cluster.acked:
        status = settle_leader.core.tx_status(txid)
        if not status.terminal:
            unresolved.append((txid, status))
    assert not unresolved, f"seed {seed}: unresolved after settle: {unresolved}"

    # anything ever reported committed anywhere is committed everywhere now
    for txid in ever_committed:
        for node in alive:
            assert node.core.tx_status(txid) == TxStatus.COMMITTED, (
                f"seed {seed}: committed {txid} regressed on {node.node_id}"
            )
    return cluster


@pytest.mark.parametrize("seed", range(8))
def test_random_schedules_three_nodes(seed):
    random_schedule_checks(seed, 3)


@pytest.mark.parametrize("seed", range(8, 12))
def test_random_schedules_five_nodes(seed):
    random_schedule_checks(seed, 5)

"""Phase machine and temperature ramp behavior."""

import numpy as np
import pytest

from specbpp.curriculum import (
    CurriculumState,
    PhaseTransition,
    Schedule,
    task_spec,
    temperature,
    update,
)


def test_fresh_state_starts_at_three():
    state = CurriculumState()
    assert state.current_n == 3
    assert not state.done
    assert state.epoch == 0


def test_perfect_accuracy_walks_all_phases():
    state = CurriculumState()
    seen = [state.current_n]
    for _ in range(6):
        state, _ = update(state, 1.0)
        seen.append(state.current_n)
    assert seen == [3, 4, 5, 6, 7, 8, 8]
    assert state.done


def test_below_threshold_never_advances():
    state = CurriculumState()
    for _ in range(40):
        state, transition = update(state, 0.98)
        assert transition is None
    assert state.current_n == 3


def test_single_pass_at_seven_reaches_eight_and_caps():
    state = CurriculumState(passed=(True, True, True, True, False))
    assert state.current_n == 7
    state, transition = update(state, 0.995)
    assert state.current_n == 8
    assert transition.old_n == 7 and transition.new_n == 8
    for _ in range(3):
        state, transition = update(state, 1.0)
        assert state.current_n == 8
        assert transition is None


def test_one_threshold_per_update():
    state = CurriculumState()
    state, _ = update(state, 1.0)
    assert state.current_n == 4  # not 5+, no multi-phase jumps


def test_latching_survives_accuracy_collapse():
    state = CurriculumState()
    state, _ = update(state, 0.999)
    assert state.current_n == 4
    for _ in range(10):
        state, _ = update(state, 0.0)
    assert state.current_n == 4


def test_update_rejects_out_of_range_accuracy():
    state = CurriculumState()
    for bad in (-0.1, 1.5):
        with pytest.raises(ValueError, match="val_acc"):
            update(state, bad)


def test_state_validation():
    with pytest.raises(ValueError, match="thresholds"):
        CurriculumState(thresholds=(0.99,) * 3)
    with pytest.raises(ValueError, match="prefix"):
        CurriculumState(passed=(False, True, False, False, False))
    with pytest.raises(ValueError, match="0, 1"):
        CurriculumState(thresholds=(0.99, 0.99, 0.99, 0.99, 1.3))


def test_phase_start_resets_to_next_epoch():
    state = CurriculumState()
    for _ in range(7):
        state, _ = update(state, 0.5)
    assert state.epoch == 7 and state.phase_start_epoch == 0
    state, transition = update(state, 1.0)
    assert transition is not None
    assert state.phase_start_epoch == 8 == state.epoch


def test_temperature_anchors():
    sched = Schedule(t_min=1.0, t_max=100.0, phase_length_hint=10)
    state = CurriculumState()
    assert temperature(state, sched) == 1.0
    mid = CurriculumState(epoch=5)
    assert temperature(mid, sched) == pytest.approx((1.0 + 100.0) / 2)
    late = CurriculumState(epoch=10)
    assert temperature(late, sched) == 100.0
    beyond = CurriculumState(epoch=25)
    assert temperature(beyond, sched) == 100.0


def test_temperature_nondecreasing_within_phase():
    sched = Schedule(t_min=0.5, t_max=8.0, phase_length_hint=7)
    temps = [temperature(CurriculumState(epoch=e), sched) for e in range(20)]
    assert all(b >= a for a, b in zip(temps, temps[1:]))
    assert all(0.5 <= t <= 8.0 for t in temps)


def test_temperature_resets_at_transition():
    sched = Schedule(t_min=1.0, t_max=100.0, phase_length_hint=5)
    state = CurriculumState()
    for _ in range(6):
        state, _ = update(state, 0.5, sched)
    assert temperature(state, sched) == 100.0
    state, transition = update(state, 1.0, sched)
    assert transition is not None
    assert temperature(state, sched) == 1.0


def test_schedule_validation():
    with pytest.raises(ValueError, match="t_min"):
        Schedule(t_min=2.0, t_max=1.0)
    with pytest.raises(ValueError, match="t_min"):
        Schedule(t_min=0.0)
    with pytest.raises(ValueError, match="phase_length_hint"):
        Schedule(phase_length_hint=0)


def test_task_spec_tracks_state():
    sched = Schedule(t_min=1.0, t_max=10.0, phase_length_hint=5)
    state = CurriculumState()
    n, sampler = task_spec(state, sched)
    assert n == 3 and sampler.n_segments == 3
    assert sampler.temperature == 1.0
    for _ in range(5):
        state, _ = update(state, 1.0, sched)
    n, sampler = task_spec(state, sched)
    assert n == 8 and sampler.n_segments == 8


def test_scripted_trace_replays_identically():
    rng = np.random.default_rng(7)
    trace = rng.uniform(0.0, 1.0, size=60).tolist()

    def play():
        state = CurriculumState()
        events = []
        for acc in trace:
            state, tr = update(state, acc)
            if tr is not None:
                events.append((tr.epoch, tr.old_n, tr.new_n))
        return events

    assert play() == play()


def test_transition_record_fields():
    sched = Schedule(t_min=1.0, t_max=100.0, phase_length_hint=5)
    state = CurriculumState(epoch=12, phase_start_epoch=12)
    _, tr = update(state, 0.993, sched)
    rec = tr.record()
    assert rec == {
        "epoch": 12,
        "old_n": 3,
        "new_n": 4,
        "val_acc": 0.993,
        "temperature": 1.0,
    }


def test_interleaved_trace_yields_full_phase_sequence():
    # six passing values separated by sub-threshold stretches walk
    # 3 through 8 with exactly five transitions, latched throughout
    state = CurriculumState()
    trace = [0.5, 0.992, 0.3, 0.4, 0.999, 1.0, 0.1, 0.995, 0.99, 0.2, 0.997]
    ns = []
    transitions = []
    for acc in trace:
        state, tr = update(state, acc)
        ns.append(state.current_n)
        if tr is not None:
            transitions.append((tr.old_n, tr.new_n))
    assert transitions == [(3, 4), (4, 5), (5, 6), (6, 7), (7, 8)]
    assert ns == [3, 4, 4, 4, 5, 6, 6, 7, 8, 8, 8]

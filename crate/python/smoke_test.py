"""Smoke test for the autocollect extension module."""

import os
import tempfile

import autocollect


def main() -> None:
    assert "push_block" in autocollect.templates()

    world = autocollect.World.spawn("push_stack", seed=3)
    assert world.template == "push_stack"
    assert len(world.object_names()) >= 2
    again = autocollect.World.from_dict(world.to_dict())
    assert again.to_dict() == world.to_dict()
    assert isinstance(world.predicates(), dict)

    library = autocollect.Library.record_seed(per_verb=2, seed=1)
    assert len(library) == 16

    plan = library.plan(world)
    assert len(plan["forward"]) == 2 and len(plan["reverse"]) == 2
    assert autocollect.validate_plan(plan) == []
    swapped = dict(plan, reverse=list(reversed(plan["reverse"])))
    assert len(autocollect.validate_plan(swapped)) == 2

    assert autocollect.step_fsm("forward_execution", "forward_result", True) == ("reverse_execution", "none")
    assert autocollect.step_fsm("reverse_execution", "reverse_result", True) == ("forward_execution", "dual")
    assert autocollect.step_fsm("reverse_execution", "reverse_result", False) == ("task_planning", "single")
    try:
        autocollect.step_fsm("task_planning", "reverse_result", True)
    except autocollect.AutocollectError:
        pass
    else:
        raise AssertionError("illegal transition accepted")

    with tempfile.TemporaryDirectory() as tmp:
        config = f"""
library_path = "{os.path.join(tmp, 'lib.jsonl')}"
dataset_path = "{os.path.join(tmp, 'data.jsonl')}"
master_seed = 2
workers = 2

[[tasks]]
template = "push_block"
episodes = 4
"""
        stats = autocollect.run_campaign(config)
        total = stats["total"]
        assert total["episodes"] == 4
        assert total["dual"] + total["single"] + total["discarded"] == 4
        assert autocollect.format_stats(stats).startswith("Task")

        data = os.path.join(tmp, "data.jsonl")
        episodes, corrupt = autocollect.read_dataset(data)
        assert corrupt == []
        assert len(episodes) == total["dual"] + total["single"]
        assert all(r["agreement"] for r in autocollect.replay_dataset(data))
        assert len(autocollect.dataset_hash(data)) == 64

        dry = autocollect.plan_campaign(config)
        assert dry[0]["violations"] == []

    print("smoke test passed")


if __name__ == "__main__":
    main()

"""Quick end-to-end check of the Python bindings."""

import math
import os
import tempfile

import a2pr


def main():
    data = a2pr.Dataset.generate(3000, seed=2)
    assert len(data) == 3000
    assert (data.state_dim, data.action_dim) == (4, 2)
    rewards = dict(data.reward_histogram())
    assert set(rewards) <= {0.0, 1.0, 2.0, 4.0}

    back = a2pr.Dataset.from_bytes(data.to_bytes())
    assert back.transition(17) == data.transition(17)
    try:
        a2pr.Dataset.from_bytes(b"garbage")
    except RuntimeError as e:
        assert "magic" in str(e)
    else:
        raise AssertionError("corrupt bytes accepted")

    cfg = a2pr.TrainConfig(
        total_steps=30, batch_size=32, eval_every=15, log_every=15,
        checkpoint_every=30, eval_episodes=2, true_q_states=2,
        critic_hidden=16, actor_hidden=16, vae_hidden=16, seed=5,
    )
    cfg.set("variant", "a2pr")
    assert cfg.get("alpha") == "2.5"
    try:
        cfg.set("variant", "bogus")
    except ValueError:
        pass
    else:
        raise AssertionError("bad variant accepted")

    with tempfile.TemporaryDirectory() as tmp:
        t = a2pr.Trainer(cfg, data, anchor_dir=tmp)
        q_loss, v_loss, pol = t.step()
        assert math.isfinite(q_loss) and math.isfinite(v_loss) and pol is None
        t = a2pr.Trainer(cfg, data, anchor_dir=tmp)
        t.run(os.path.join(tmp, "run"))
        rows = t.metrics()
        assert [r["step"] for r in rows] == [0, 15, 30]
        assert rows[0]["q_loss"] is None and rows[-1]["eval_return_mean"] is not None

        again = a2pr.Trainer(cfg, data, anchor_dir=tmp)
        again.run()
        assert again.metrics_csv() == t.metrics_csv()

        ckpt = os.path.join(tmp, "run", "final")
        report = a2pr.evaluate(ckpt, episodes=3)
        assert report["episodes"] == 3
        est, true = a2pr.true_q(ckpt, states=2)
        assert math.isfinite(est) and math.isfinite(true)
        fx, fy = t.act([3.5, 3.5, 0.0, 0.0])
        assert abs(fx) <= 1 and abs(fy) <= 1

    assert a2pr.normalized_score(2.0, 0.0, 4.0) == 50.0
    print("python smoke test ok")


if __name__ == "__main__":
    main()

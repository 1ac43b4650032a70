"""
What a fading uplink does to signed gradients
=============================================

Each report is d sign bits sent over B channel uses. It gets through only
if d <= B log2(1 + |h|^2 SNR); otherwise the base station sees zeros.
"""
import numpy as np

from mtfeel.channel import ChannelConfig, delivered_draws, outage_prob
from mtfeel.experiment import apply_override, load_config, run_experiment

# Closed form against simulation, payload at a tenth of the bandwidth.
d = 1002
for snr_db in (-20, -10, 0, 10):
    cfg = ChannelConfig.from_db(snr_db, bandwidth=10 * d)
    sim = 1 - np.mean(delivered_draws(cfg, d, np.random.default_rng(0), 200_000))
    print(f"{snr_db:+4d} dB  outage {outage_prob(cfg, d):.4f}  simulated {sim:.4f}")

# Same sweep, now through training. Below -10 dB almost nothing arrives.
base = load_config(preset="desk-cohort")
base = apply_override(base, "algorithms", ["mtfeel"])
base = apply_override(base, "channel.mode", "rayleigh")
base = apply_override(base, "channel.payload_ratio", 0.1)
for snr_db in (-20, -10, 0, 10):
    res = run_experiment(apply_override(base, "channel.snr_db", float(snr_db)), write=False)
    h = res.histories["mtfeel"]
    print(f"{snr_db:+4d} dB  final test accuracy {h[-1].mean_test_acc:.3f}  "
          f"lost reports {sum(m.outages for m in h)}")

# Random bit flips instead of outages: at p = 0.5 the signs carry nothing.
for p in (0.0, 0.2, 0.5):
    cfg = apply_override(apply_override(base, "channel.mode", "bitflip"), "channel.flip_p", p)
    print(f"flip p={p:.1f}  final test accuracy {run_experiment(cfg, write=False).final('mtfeel').mean_test_acc:.3f}")

"""One sifted block through reconciliation, estimation and amplification.

Draws photon-number tallies for a 1550 nm link at its expected rates, runs
Cascade on a matching noisy bit string, and turns the block into secret
key. Prints each quantity the key length depends on.
"""
import numpy as np

from wdmqkd.core import LinkConfig, ProtocolConfig, binary_entropy
from wdmqkd.finite_key import estimate, pa_seed, privacy_amplify
from wdmqkd.rates import decoy_parameters, expected_link_rates, misalignment_for_qber
from wdmqkd.reconciliation import cascade_reconcile, confirm_correctness

rng = np.random.default_rng(1)
protocol = ProtocolConfig(block_size_sifted=1_000_000)

base, off_k, off_c = misalignment_for_qber(LinkConfig("1550"), 0.011)
cfg = LinkConfig("1550", residual_misalignment=base, basis_offset_k=off_k, basis_offset_c=off_c)
rates = expected_link_rates(cfg, protocol)
print(f"click rate {rates.click_rate:.0f}/s, sifted key rate {rates.sifted_key_rate:.0f}/s")
print(f"block of {protocol.block_size_sifted} bits fills in {rates.block_fill_time:.0f} s")

n = rng.poisson(rates.n)
m = rng.binomial(n, rates.m / rates.n)
n_K = int(n[0].sum())
qber = m[0].sum() / n_K
print(f"tallies n={n.tolist()} m={m.tolist()}, key-basis QBER {qber:.4f}")

alice = rng.integers(0, 2, n_K, dtype=np.uint8)
bob = alice.copy()
bob[rng.choice(n_K, int(m[0].sum()), replace=False)] ^= 1
rec = cascade_reconcile(alice, bob, qber, seed=7)
ok, lam_c = confirm_correctness(alice, rec.corrected_bits, protocol.eps_cor, seed=7)
print(f"Cascade leaked {rec.leaked_bits} bits, f = {rec.efficiency:.3f}, confirmed: {ok}")

est = estimate(n, m, rec.leaked_bits, lam_c, decoy_parameters(cfg, protocol))
print(f"s_K0 >= {est.s_K0_lower:.0f}, s_K1 >= {est.s_K1_lower:.0f}, phi_K <= {est.phi_K_upper:.4f}")
print(f"single-photon leakage bound {est.s_K1_lower * binary_entropy(est.phi_K_upper):.0f} bits")

key = privacy_amplify(rec.corrected_bits, est.skl, pa_seed(n_K, est.skl, 7))
print(f"secret key: {len(key)} bits ({len(key) / n_K:.3f} per sifted bit), "
      f"{len(key) / rates.block_fill_time:.0f} bps")

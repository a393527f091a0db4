import numpy as np
from persidskii.pmsm import (
    FocController, LoadProfile, PmsmParams, analytic_jacobian,
    closed_loop_bandwidths, cross_coupling_disturbance, foc_closed_loop_matrices,
    foc_delay_cast, foc_gains, observer_error_cast, pmsm_energy, pmsm_rhs,
    to_persidskii,
)
from persidskii.model import rhs as cast_rhs, simulate, verify_sector

P = PmsmParams()

# rhs basics
assert np.allclose(pmsm_rhs(P, np.zeros(3), np.zeros(2)), 0.0)
iq_star = (P.B_f * 100.0 + 2.0) / P.torque_constant
d = pmsm_rhs(P, [0.0, iq_star, 100.0], [0.0, 0.0], T_L=2.0)
assert abs(d[2]) < 1e-12
d2 = pmsm_rhs(P, [0.0, 1.0, 0.0], [0.0, 0.0])
assert abs(d2[2] - 1.5 * 3 * 0.175 / P.J) < 1e-12
assert abs(d2[1] - (-0.82 / 0.0052)) < 1e-9
print("rhs oracle values ok")

# keystone: sector cast == physical rhs on the box at tau = 0
rng = np.random.default_rng(0)
sys_sector = to_persidskii(P, tau=0.0)
wmax_m = P.omega_e_max_default / P.p_pairs
worst = 0.0
for _ in range(1000):
    x = np.array([rng.uniform(-P.i_max, P.i_max), rng.uniform(-P.i_max, P.i_max),
                  rng.uniform(-wmax_m, wmax_m)])
    u = rng.uniform(-P.u_max, P.u_max, 2)
    TL = rng.uniform(-P.rated_torque, P.rated_torque)
    f_cast = cast_rhs(sys_sector, x, x, np.array([TL]), u)
    f_true = pmsm_rhs(P, x, u, TL)
    worst = max(worst, np.max(np.abs(f_cast - f_true)) / max(1.0, np.max(np.abs(f_true))))
assert worst < 1e-10, worst
print("keystone sector cast ok, worst rel err %.2e" % worst)

# disturbance cast
sys_dist = to_persidskii(P, mode="disturbance")
worst = 0.0
for _ in range(200):
    x = rng.uniform(-10, 10, 3)
    u = rng.uniform(-50, 50, 2)
    TL = rng.uniform(-5, 5)
    w = cross_coupling_disturbance(P, x, TL)
    f_cast = cast_rhs(sys_dist, x, x, w, u)
    f_true = pmsm_rhs(P, x, u, TL)
    worst = max(worst, np.max(np.abs(f_cast - f_true)))
assert worst < 1e-9, worst
assert np.allclose(cast_rhs(sys_dist, np.zeros(3), np.zeros(3),
                            cross_coupling_disturbance(P, np.zeros(3), 1.7), np.zeros(2)),
                   sys_dist.D @ [1.7, 0, 0])
print("keystone disturbance cast ok")

# sector validity of the scheduled channel
chk = verify_sector(sys_sector.nonlinearities[0], 2 * P.L_s * P.i_max,
                    rng=np.random.default_rng(1))
assert chk.passed
print("sector check ok")

# energy non-increase, u = 0, T_L = 0
sys0 = to_persidskii(P, tau=0.0)
x0 = np.array([5.0, -8.0, 120.0])
traj = simulate(sys0, x0, 2.0, 1e-4)
E = np.array([pmsm_energy(P, s) for s in traj.states])
dE = np.diff(E)
assert np.all(dE <= 1e-9 * max(1.0, E[0])), dE.max()
print("energy dissipation ok (E0=%.3f -> %.5f)" % (E[0], E[-1]))

# analytic jacobian vs finite differences
jac = analytic_jacobian(sys_sector)
x = np.array([2.0, -3.0, 80.0])
Ja = jac(x, x, None)
Jn = np.zeros((3, 3))
h = 1e-6
for j in range(3):
    e = np.zeros(3); e[j] = h
    Jn[:, j] = (cast_rhs(sys_sector, x + e, x + e, None, np.zeros(2))
                - cast_rhs(sys_sector, x - e, x - e, None, np.zeros(2))) / (2 * h)
assert np.max(np.abs(Ja - Jn)) < 1e-4 * max(1.0, np.max(np.abs(Jn))), (Ja, Jn)
print("analytic jacobian ok")

# FOC gains + bandwidth separation
g = foc_gains(P)
bw_i, bw_o = closed_loop_bandwidths(P, g)
print("bandwidths: inner %.1f Hz, outer %.1f Hz, ratio %.2f"
      % (bw_i / (2 * np.pi), bw_o / (2 * np.pi), bw_i / bw_o))
assert bw_i / bw_o >= 10.0, bw_i / bw_o

m = foc_closed_loop_matrices(P, g)
A_cl = m["A0"] + np.outer(m["b_cmd"], m["k_cmd"])
eig = np.linalg.eigvals(A_cl)
assert np.all(eig.real < 0), eig
print("cascade stable, slowest mode %.1f rad/s" % (-eig.real.max()))

# zero error, zero integrators -> feedforward only
ctrl = FocController(P, g)
x_ref_state = np.array([0.0, 0.0, 50.0])
u = ctrl.voltage_step(x_ref_state, 0.0, 0.0)
w_e = P.p_pairs * 50.0
assert abs(u[0] - (-w_e * P.L_s * 0.0)) < 1e-12
assert abs(u[1] - w_e * P.psi_f) < 1e-12
print("feedforward-only output ok")

# integrator arithmetic: pure integrator accumulates K_i e t
g2 = foc_gains(P)
ctrl2 = FocController(P, g2)
ctrl2.gains = g2
e = 3.0
for _ in range(100):
    ctrl2.current_reference(0.0, e, 1e-3)
iq_ref = g2.kp_speed * e + g2.ki_speed * ctrl2.z_w
assert abs(ctrl2.z_w - e * 0.1) < 1e-9, ctrl2.z_w
print("integrator accumulation ok (iq_ref=%.3f A)" % iq_ref)

# detuned gains for 5 ms command delay
g5 = foc_gains(P, command_delay=5e-3)
print("detuned speed crossover: %.1f rad/s (%.1f Hz)"
      % (g5.speed_crossover, g5.speed_crossover / (2 * np.pi)))
m5 = foc_closed_loop_matrices(P, g5)

# true critical delay of the linear loop (characteristic-root crossing)
def crit_delay(A0, b, k):
    # smallest tau where det(jw I - A0 - b k^T e^{-jw tau}) = 0 for some w
    best = None
    for w in np.linspace(1.0, 3000.0, 120000):
        Mjw = 1j * w * np.eye(6) - A0
        # rank-one delayed term: root when 1 = k^T (jwI - A0)^{-1} b e^{-jw tau}
        h = np.linalg.solve(Mjw, b)
        val = complex(k @ h)
        r = abs(val)
        if r >= 1.0:
            # phase condition: e^{-jw tau} = 1/val
            ang = np.angle(1.0 / val)
            tau = ang / (-w)
            while tau < 0:
                tau += 2 * np.pi / w
            if best is None or tau < best[0]:
                best = (tau, w, r)
    return best

best = crit_delay(m5["A0"], m5["b_cmd"], m5["k_cmd"])
print("true critical command delay: tau*=%.2f ms at w=%.1f rad/s (|L|=%.3f)"
      % (best[0] * 1e3, best[1], best[2]))

"""Reference three-phase Z-Bus load-flow solver, ported from OPEN.

This is a trimmed, dependency-light port of the ``Network_3ph`` solver from
EPG Oxford's OPEN platform (open-source, https://github.com/EPGOxford/OPEN,
file OPEN/Network_3ph_pf.py), kept deliberately faithful to the original
computational route so it can serve as an independent reference for the
library's own Z-Bus implementation:

* every bus carries all three phases, absent phases become near-isolated
  nodes via the 1e-20 diagonal regularization (the library instead models
  only present phases);
* Z is an explicit dense inverse (the library applies a factorized solve);
* the fixed point runs a fixed number of sweeps with per-phase scalar loops
  (the library is vectorized with a magnitude-sum stopping rule).

Only the pandas-era API calls were modernized; formulas and loop structure
follow the original. Works in volts/siemens like the original.
"""

from __future__ import annotations

import numpy as np


class RefBus:
    def __init__(self, name: str, number: int, load_type: str, connect: str,
                 loads=((0.0, 0.0), (0.0, 0.0), (0.0, 0.0))):
        self.name = name
        self.number = number
        self.load_type = load_type  # 'S' or 'PQ'
        self.connect = connect  # 'Y' or 'D'
        # per-phase (P_kW, Q_kvar); for 'D' the slots mean Sab, Sbc, Sca
        self.loads = loads


class RefLine:
    def __init__(self, bus_a: str, bus_b: str, z: np.ndarray, b: np.ndarray):
        self.bus_a = bus_a
        self.bus_b = bus_b
        self.z = z  # 3x3 complex series impedance (ohm), zero rows = absent
        self.b = b  # 3x3 complex shunt admittance (S, already j-valued)


class RefTransformer:
    def __init__(self, bus_a: str, bus_b: str, type_a: str, type_b: str,
                 z_series: complex, z_shunt: complex = 0.0):
        self.bus_a = bus_a
        self.bus_b = bus_b
        self.type_a = type_a
        self.type_b = type_b
        self.z_series = z_series
        self.z_shunt = z_shunt


class RefCapacitor:
    def __init__(self, bus: str, kv_ln: float, connect: str, q_kvar):
        self.bus = bus
        self.kv_ln = kv_ln
        self.connect = connect
        self.q_kvar = q_kvar  # (Qa, Qb, Qc)


def _reduced_inverse(z3: np.ndarray) -> np.ndarray:
    """Invert a 3x3 impedance block over its present phases (zero diag = absent)."""
    phases = [z3[0, 0] != 0, z3[1, 1] != 0, z3[2, 2] != 0]
    idx = [i for i in range(3) if phases[i]]
    out = np.zeros((3, 3), dtype=complex)
    if idx:
        sub = z3[np.ix_(idx, idx)]
        inv = np.linalg.inv(sub)
        for a, i in enumerate(idx):
            for b, j in enumerate(idx):
                out[i, j] = inv[a, b]
    return out


class RefNetwork3ph:
    """Assemble Ynet over 3 phases per bus and run the Z-Bus fixed point."""

    def __init__(self, buses, lines, transformers, capacitors, vslack_ph: float,
                 n_iter: int = 30):
        self.buses = buses
        self.lines = lines
        self.transformers = transformers
        self.capacitors = capacitors
        self.vslack_ph = vslack_ph
        self.n_iter = n_iter
        self._index = {b.name: b.number for b in buses}
        self.update_y_and_z()

    def update_y_and_z(self):
        n = len(self.buses)
        ynet = np.zeros((3 * n, 3 * n), dtype=complex)

        for line in self.lines:
            yseries = _reduced_inverse(line.z)
            yshunt = line.b
            ia = 3 * self._index[line.bus_a]
            ib = 3 * self._index[line.bus_b]
            ynet[ia : ia + 3, ia : ia + 3] += 0.5 * yshunt + yseries
            ynet[ib : ib + 3, ib : ib + 3] += 0.5 * yshunt + yseries
            ynet[ia : ia + 3, ib : ib + 3] = -yseries
            ynet[ib : ib + 3, ia : ia + 3] = -yseries

        for tr in self.transformers:
            y = 1.0 / tr.z_series
            if tr.type_a == "wye-g" and tr.type_b == "wye-g":
                y_aa = np.eye(3, dtype=complex) * y
                y_bb = y_aa
                y_ab = -y_aa
                y_ba = -y_aa
            else:
                raise NotImplementedError("reference port covers wye-g/wye-g only")
            yshunt = (
                (1.0 / tr.z_shunt) * np.eye(3) if abs(tr.z_shunt) else np.zeros((3, 3))
            )
            ia = 3 * self._index[tr.bus_a]
            ib = 3 * self._index[tr.bus_b]
            ynet[ia : ia + 3, ia : ia + 3] += 0.5 * yshunt + y_aa
            ynet[ib : ib + 3, ib : ib + 3] += 0.5 * yshunt + y_bb
            ynet[ia : ia + 3, ib : ib + 3] = y_ab
            ynet[ib : ib + 3, ia : ia + 3] = y_ba

        for cap in self.capacitors:
            kvph = cap.kv_ln * 1e3
            zmat = np.zeros((3, 3), dtype=complex)
            for k in range(3):
                q = cap.q_kvar[k] * 1e3
                if cap.connect == "Y" and q != 0:
                    zmat[k, k] = -1j * kvph**2 / q
            ymat = _reduced_inverse(zmat)
            ib = 3 * self._index[cap.bus]
            ynet[ib : ib + 3, ib : ib + 3] += ymat

        self.ynet = ynet
        self.y = ynet[3:, 3:]
        self.yns = ynet[3:, 0:3]
        self.ysn = ynet[0:3, 3:]
        self.yss = ynet[0:3, 0:3]
        self.z = np.linalg.inv(self.y + 1e-20 * np.eye(self.y.shape[0]))

    def zbus_pf(self) -> np.ndarray:
        """Fixed number of Z-Bus sweeps; returns voltages over ALL node-phases."""
        n_red = self.y.shape[0]
        s_wye = np.zeros(n_red, dtype=complex)
        s_del = np.zeros(n_red, dtype=complex)
        for bus in self.buses:
            if bus.number == 0:
                continue
            base = (bus.number - 1) * 3
            for k in range(3):
                s = (bus.loads[k][0] + 1j * bus.loads[k][1]) * 1e3
                if bus.connect == "Y":
                    s_wye[base + k] = s
                else:
                    s_del[base + k] = s

        aaa = np.exp(1j * np.pi * 2 / 3)
        vs = np.array([1, aaa**2, aaa], dtype=complex) * self.vslack_ph
        v = np.zeros(n_red, dtype=complex)
        for ph in range(n_red):
            v[ph] = vs[ph % 3]

        i_pq = np.zeros(n_red, dtype=complex)
        for ph in range(n_red):
            if np.abs(s_wye[ph]) > 0:
                i_pq[ph] = -np.conj(s_wye[ph] / v[ph])
            if np.abs(s_del[ph]) > 0:
                m = ph % 3
                if m == 0:
                    i_pq[ph] = -np.conj(s_del[ph] / (v[ph] - v[ph + 1])) - np.conj(
                        s_del[ph + 2] / (v[ph] - v[ph + 2])
                    )
                elif m == 1:
                    i_pq[ph] = -np.conj(s_del[ph - 1] / (v[ph] - v[ph - 1])) - np.conj(
                        s_del[ph] / (v[ph] - v[ph + 1])
                    )
                else:
                    i_pq[ph] = -np.conj(s_del[ph] / (v[ph] - v[ph - 2])) - np.conj(
                        s_del[ph - 1] / (v[ph] - v[ph - 1])
                    )

        v0 = -self.z @ (self.yns @ vs)
        for _ in range(1, self.n_iter):
            v = self.z @ i_pq + v0
            i_pq = np.zeros(n_red, dtype=complex)
            for ph in range(n_red):
                if np.abs(v[ph]) > 0 and np.abs(s_wye[ph]) > 0:
                    i_pq[ph] -= np.conj(s_wye[ph] / v[ph])
                m = ph % 3
                if m == 0:
                    if np.abs(s_del[ph]) > 0 and np.abs(v[ph + 1]) > 0:
                        i_pq[ph] -= np.conj(s_del[ph] / (v[ph] - v[ph + 1]))
                    if np.abs(s_del[ph + 2]) > 0 and np.abs(v[ph + 2]) > 0:
                        i_pq[ph] -= np.conj(s_del[ph + 2] / (v[ph] - v[ph + 2]))
                elif m == 1:
                    if np.abs(s_del[ph - 1]) > 0 and np.abs(v[ph - 1]) > 0:
                        i_pq[ph] -= np.conj(s_del[ph - 1] / (v[ph] - v[ph - 1]))
                    if np.abs(s_del[ph]) > 0 and np.abs(v[ph + 1]) > 0:
                        i_pq[ph] -= np.conj(s_del[ph] / (v[ph] - v[ph + 1]))
                else:
                    if np.abs(s_del[ph]) > 0 and np.abs(v[ph - 2]) > 0:
                        i_pq[ph] -= np.conj(s_del[ph] / (v[ph] - v[ph - 2]))
                    if np.abs(s_del[ph - 1]) > 0 and np.abs(v[ph - 1]) > 0:
                        i_pq[ph] -= np.conj(s_del[ph - 1] / (v[ph] - v[ph - 1]))

        return np.concatenate([vs, v])

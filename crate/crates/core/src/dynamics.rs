//! Weak-drive amplitude dynamics of a cavity mode coupled to many two-level
//! atoms.
//!
//! Basis convention: `|n; S⟩` with n photons and S the set of excited atoms.
//! To first order in the drive the state is
//! `|0;∅⟩ + a₁|1;∅⟩ + Σ_j x_j |0;{j}⟩`, to second order it adds
//! `a₂₀|2;∅⟩ + Σ_j a₁ⱼ|1;{j}⟩ + Σ_{j<k} a₀ⱼₖ|0;{j,k}⟩`, with number states
//! normalized so that `a|2⟩ = √2|1⟩`.
//!
//! In the one-excitation sector only the bright superposition of each
//! detuning class couples to the field, so the field dynamics reduce exactly
//! to one collective amplitude per [`DetuningClass`]. The two-excitation
//! steady state keeps per-atom resolution because atomic saturation depends
//! on the individual couplings, not only on their collective sum.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::RateParams;
use crate::ode::{self, OdeOptions};
use crate::trace::CorrelationTrace;

type C = Complex64;

const ZERO: C = C::new(0.0, 0.0);
const ONE: C = C::new(1.0, 0.0);

fn im(x: f64) -> C {
    C::new(0.0, x)
}

/// A group of identical two-level atoms: coupling g (rad/µs), atom–drive
/// detuning (rad/µs) and a multiplicity. Multiplicity 1 is a single atom;
/// non-integer multiplicities continue the homogeneous N-atom model to
/// effective atom numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Emitter {
    pub coupling: f64,
    pub detuning: f64,
    pub multiplicity: f64,
}

impl Emitter {
    pub fn atom(coupling: f64, detuning: f64) -> Self {
        Emitter {
            coupling,
            detuning,
            multiplicity: 1.0,
        }
    }

    /// N maximally coupled atoms at the atomic detuning of `params`.
    pub fn homogeneous(params: &RateParams, n_atoms: f64) -> Self {
        Emitter {
            coupling: params.g_max,
            detuning: params.delta_a,
            multiplicity: n_atoms,
        }
    }
}

/// Collective coupling G_k = sqrt(Σ g_i²) of all atoms sharing detuning Δ_k.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetuningClass {
    pub coupling: f64,
    pub detuning: f64,
}

/// Groups emitters by detuning. Classes appear in order of first
/// occurrence; an empty input yields one uncoupled class.
pub fn reduce_to_classes(emitters: &[Emitter]) -> Vec<DetuningClass> {
    let (classes, _) = classify(emitters);
    classes
}

fn classify(emitters: &[Emitter]) -> (Vec<DetuningClass>, Vec<usize>) {
    let mut detunings: Vec<f64> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    let mut membership = Vec::with_capacity(emitters.len());
    for e in emitters {
        let idx = match detunings.iter().position(|&d| d == e.detuning) {
            Some(i) => i,
            None => {
                detunings.push(e.detuning);
                sums.push(0.0);
                detunings.len() - 1
            }
        };
        sums[idx] += e.multiplicity * e.coupling * e.coupling;
        membership.push(idx);
    }
    if detunings.is_empty() {
        return (
            vec![DetuningClass {
                coupling: 0.0,
                detuning: 0.0,
            }],
            membership,
        );
    }
    let classes = detunings
        .into_iter()
        .zip(sums)
        .map(|(detuning, s)| DetuningClass {
            coupling: s.sqrt(),
            detuning,
        })
        .collect();
    (classes, membership)
}

/// An atomic environment: emitter groups together with their detuning
/// classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Medium {
    emitters: Vec<Emitter>,
    classes: Vec<DetuningClass>,
    membership: Vec<usize>,
}

impl Medium {
    pub fn new(emitters: Vec<Emitter>) -> Result<Self> {
        for e in &emitters {
            if !(e.coupling.is_finite() && e.coupling >= 0.0) {
                return Err(Error::InvalidParameter(format!("coupling must be >= 0 (got {})", e.coupling)));
            }
            if !e.detuning.is_finite() {
                return Err(Error::InvalidParameter("detuning must be finite".into()));
            }
            if !(e.multiplicity.is_finite() && e.multiplicity >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "multiplicity must be >= 0 (got {})",
                    e.multiplicity
                )));
            }
        }
        let (classes, membership) = classify(&emitters);
        Ok(Medium {
            emitters,
            classes,
            membership,
        })
    }

    /// N maximally coupled, identical atoms (N may be fractional).
    pub fn homogeneous(params: &RateParams, n_atoms: f64) -> Result<Self> {
        if n_atoms == 0.0 {
            return Self::new(Vec::new());
        }
        Self::new(vec![Emitter::homogeneous(params, n_atoms)])
    }

    pub fn emitters(&self) -> &[Emitter] {
        &self.emitters
    }

    pub fn classes(&self) -> &[DetuningClass] {
        &self.classes
    }

    /// Class index of each emitter group.
    pub fn membership(&self) -> &[usize] {
        &self.membership
    }
}

/// First-order amplitudes: the field and one bright polarization amplitude
/// per detuning class.
#[derive(Debug, Clone, PartialEq)]
pub struct OneExcitationState {
    pub field: C,
    pub polarization: Vec<C>,
}

impl OneExcitationState {
    pub fn vacuum(n_classes: usize) -> Self {
        OneExcitationState {
            field: ZERO,
            polarization: vec![ZERO; n_classes],
        }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.field.norm_sqr() + self.polarization.iter().map(|b| b.norm_sqr()).sum::<f64>()
    }

    fn to_vec(&self) -> Vec<C> {
        let mut v = Vec::with_capacity(1 + self.polarization.len());
        v.push(self.field);
        v.extend_from_slice(&self.polarization);
        v
    }

    fn from_slice(v: &[C]) -> Self {
        OneExcitationState {
            field: v[0],
            polarization: v[1..].to_vec(),
        }
    }
}

/// Second-order steady-state amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoExcitationState {
    /// Amplitude of `|2;∅⟩`.
    pub two_photon: C,
    /// Amplitude of photon plus excited bright mode, per class (T_k/G_k).
    pub photon_bright: Vec<C>,
    /// Per-atom amplitude of `|1;{j}⟩` for each emitter group.
    pub photon_emitter: Vec<C>,
    couplings: Vec<f64>,
    pair_decay: Vec<C>,
}

impl TwoExcitationState {
    /// Amplitude of two distinct excited atoms taken from groups `p` and `q`
    /// (for `p == q`, two different atoms of the same group).
    pub fn pair(&self, p: usize, q: usize) -> C {
        let m = self.couplings.len();
        let d = self.pair_decay[p * m + q];
        -(self.couplings[q] * self.photon_emitter[p] + self.couplings[p] * self.photon_emitter[q]) / d
    }

    /// Number of amplitudes over emitter groups, 1 + M + M(M+1)/2.
    pub fn dimension(&self) -> usize {
        let m = self.photon_emitter.len();
        1 + m + m * (m + 1) / 2
    }
}

/// Coefficient matrix M of the first-order system dy/dt = M y + ε e₀ with
/// y = (a₁, b₁, …, b_K).
pub fn generator(params: &RateParams, classes: &[DetuningClass]) -> DMatrix<C> {
    let n = 1 + classes.len();
    let mut m = DMatrix::from_element(n, n, ZERO);
    m[(0, 0)] = -(params.kappa + im(params.delta_c));
    for (k, cl) in classes.iter().enumerate() {
        m[(0, k + 1)] = C::new(cl.coupling, 0.0);
        m[(k + 1, 0)] = C::new(-cl.coupling, 0.0);
        m[(k + 1, k + 1)] = -(0.5 * params.gamma + im(cl.detuning));
    }
    m
}

/// Closed-form first-order steady state.
pub fn steady_one_excitation(params: &RateParams, classes: &[DetuningClass]) -> OneExcitationState {
    let mut denom = params.kappa + im(params.delta_c);
    for cl in classes {
        denom += cl.coupling * cl.coupling / (0.5 * params.gamma + im(cl.detuning));
    }
    let field = params.eps / denom;
    let polarization = classes
        .iter()
        .map(|cl| -cl.coupling * field / (0.5 * params.gamma + im(cl.detuning)))
        .collect();
    OneExcitationState { field, polarization }
}

/// How first-order evolution is computed.
#[derive(Debug, Clone, Copy)]
pub enum Propagation {
    RungeKutta(OdeOptions),
    MatrixExponential,
}

impl Default for Propagation {
    fn default() -> Self {
        Propagation::RungeKutta(OdeOptions::default())
    }
}

/// Evolves the first-order amplitudes from `initial` at t = 0 under drive
/// `drive` and returns the state on `t_grid` (ascending, ≥ 0).
pub fn propagate(
    params: &RateParams,
    classes: &[DetuningClass],
    initial: &OneExcitationState,
    drive: C,
    t_grid: &[f64],
    method: Propagation,
) -> Result<Vec<OneExcitationState>> {
    if initial.polarization.len() != classes.len() {
        return Err(Error::InvalidParameter("state and class count differ".into()));
    }
    if let Some(t) = t_grid.iter().find(|t| !t.is_finite() || **t < 0.0) {
        return Err(Error::InvalidParameter(format!("times must be finite and >= 0 (got {t})")));
    }
    if t_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParameter("time grid must be ascending".into()));
    }
    let m = generator(params, classes);
    let y0 = initial.to_vec();
    let states: Vec<Vec<C>> = match method {
        Propagation::RungeKutta(opts) => {
            let n = y0.len();
            let rhs = |_t: f64, y: &[C], dy: &mut [C]| {
                for i in 0..n {
                    let mut acc = ZERO;
                    for j in 0..n {
                        acc += m[(i, j)] * y[j];
                    }
                    dy[i] = acc;
                }
                dy[0] += drive;
            };
            let starts_at_zero = t_grid.first() == Some(&0.0);
            let mut grid = Vec::with_capacity(t_grid.len() + 1);
            if !starts_at_zero {
                grid.push(0.0);
            }
            grid.extend_from_slice(t_grid);
            let mut out = ode::integrate(rhs, &y0, &grid, &opts)?;
            if !starts_at_zero {
                out.remove(0);
            }
            out
        }
        Propagation::MatrixExponential => {
            // y(t) = y_ss + e^{Mt}(y0 − y_ss), y_ss = −M⁻¹ drive e₀.
            let lu = m.clone().lu();
            let mut rhs = DVector::from_element(y0.len(), ZERO);
            rhs[0] = -drive;
            let yss = lu
                .solve(&rhs)
                .ok_or_else(|| Error::SingularSystem("first-order generator".into()))?;
            let dy0 = DVector::from_vec(y0.clone()) - &yss;
            t_grid
                .iter()
                .map(|&t| {
                    let e = (&m * C::new(t, 0.0)).exp();
                    let y = &yss + e * &dy0;
                    y.iter().copied().collect()
                })
                .collect()
        }
    };
    for (t, y) in t_grid.iter().zip(&states) {
        if y.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::IntegrationFailure {
                time: *t,
                reason: "non-finite amplitude".into(),
            });
        }
    }
    Ok(states.iter().map(|y| OneExcitationState::from_slice(y)).collect())
}

/// Driven first-order evolution from the vacuum.
pub fn integrate_driven(
    params: &RateParams,
    classes: &[DetuningClass],
    t_grid: &[f64],
    opts: &OdeOptions,
) -> Result<Vec<OneExcitationState>> {
    params.validate()?;
    propagate(
        params,
        classes,
        &OneExcitationState::vacuum(classes.len()),
        C::new(params.eps, 0.0),
        t_grid,
        Propagation::RungeKutta(*opts),
    )
}

/// Field response G(t) of the undriven system to a(0) = 1, b(0) = 0.
pub fn response_kernel(params: &RateParams, classes: &[DetuningClass], t_grid: &[f64]) -> Result<Vec<C>> {
    response_kernel_with(params, classes, t_grid, Propagation::RungeKutta(OdeOptions::tight()))
}

pub fn response_kernel_with(
    params: &RateParams,
    classes: &[DetuningClass],
    t_grid: &[f64],
    method: Propagation,
) -> Result<Vec<C>> {
    params.validate()?;
    let mut init = OneExcitationState::vacuum(classes.len());
    init.field = ONE;
    Ok(propagate(params, classes, &init, ZERO, t_grid, method)?
        .into_iter()
        .map(|s| s.field)
        .collect())
}

/// Spectral form of the field component of the homogeneous evolution,
/// `[e^{Mt} v]₀ = Σ w_m e^{λ_m t}`, for fast evaluation at arbitrary times.
/// Falls back to the matrix exponential when eigenvalues are nearly
/// degenerate.
#[derive(Debug, Clone)]
pub struct KernelPropagator {
    modes: Vec<(C, C)>,
    fallback: Option<(DMatrix<C>, DVector<C>)>,
}

impl KernelPropagator {
    /// Response kernel G(t): initial state a₁ = 1, b = 0.
    pub fn new(params: &RateParams, classes: &[DetuningClass]) -> Self {
        let mut v = vec![ZERO; 1 + classes.len()];
        v[0] = ONE;
        Self::with_initial(params, classes, &v)
    }

    /// Field amplitude evolved from `initial = (a₁, b₁, …, b_K)`.
    pub fn with_initial(params: &RateParams, classes: &[DetuningClass], initial: &[C]) -> Self {
        assert_eq!(initial.len(), 1 + classes.len(), "initial state length");
        let mut active = Vec::new();
        let mut v = vec![initial[0]];
        for (cl, b) in classes.iter().zip(&initial[1..]) {
            if cl.coupling > 0.0 {
                active.push(*cl);
                v.push(*b);
            }
        }
        let cavity = params.kappa + im(params.delta_c);
        if active.is_empty() {
            return KernelPropagator {
                modes: vec![(v[0], -cavity)],
                fallback: None,
            };
        }
        let m = generator(params, &active);
        let decays: Vec<C> = active.iter().map(|c| 0.5 * params.gamma + im(c.detuning)).collect();
        // Laplace transform of the field component is Num(s)/D(s).
        let d = |s: C| -> (C, C) {
            let mut val = s + cavity;
            let mut dv = ONE;
            for (cl, dk) in active.iter().zip(&decays) {
                let g2 = cl.coupling * cl.coupling;
                let inv = 1.0 / (s + dk);
                val += g2 * inv;
                dv -= g2 * inv * inv;
            }
            (val, dv)
        };
        let num = |s: C| -> C {
            v[0] + active
                .iter()
                .zip(&decays)
                .zip(&v[1..])
                .map(|((cl, dk), b)| cl.coupling * b / (s + dk))
                .sum::<C>()
        };
        let scale = params.kappa + params.gamma + active.iter().map(|c| c.coupling).sum::<f64>();
        let vnorm = v.iter().map(|x| x.norm()).fold(0.0, f64::max).max(1e-300);
        let fallback = || KernelPropagator {
            modes: Vec::new(),
            fallback: Some((m.clone(), DVector::from_vec(v.clone()))),
        };
        let eig = match m.clone().schur().eigenvalues() {
            Some(e) => e,
            None => return fallback(),
        };
        let mut modes = Vec::with_capacity(eig.len());
        for &lam0 in eig.iter() {
            let mut lam = lam0;
            for _ in 0..3 {
                let (val, dv) = d(lam);
                if dv.norm() == 0.0 {
                    break;
                }
                lam -= val / dv;
            }
            let (_, dv) = d(lam);
            modes.push((num(lam) / dv, lam));
        }
        let min_gap = modes
            .iter()
            .enumerate()
            .flat_map(|(i, a)| modes[i + 1..].iter().map(move |b| (a.1 - b.1).norm()))
            .fold(f64::INFINITY, f64::min);
        let sum_w: C = modes.iter().map(|(w, _)| *w).sum();
        let sum_wl: C = modes.iter().map(|(w, l)| w * l).sum();
        let mv0: C = (0..v.len()).map(|j| m[(0, j)] * v[j]).sum();
        let ok = min_gap > 1e-5 * scale
            && (sum_w - v[0]).norm() < 1e-10 * vnorm
            && (sum_wl - mv0).norm() < 1e-10 * vnorm * scale;
        if ok {
            KernelPropagator { modes, fallback: None }
        } else {
            fallback()
        }
    }

    /// (value, time derivative) at t.
    pub fn eval(&self, t: f64) -> (C, C) {
        match &self.fallback {
            None => {
                let mut g = ZERO;
                let mut dg = ZERO;
                for (w, l) in &self.modes {
                    let e = w * (l * t).exp();
                    g += e;
                    dg += l * e;
                }
                (g, dg)
            }
            Some((m, v)) => {
                let y = (m * C::new(t, 0.0)).exp() * v;
                let my = m * &y;
                (y[0], my[0])
            }
        }
    }

    pub fn uses_fallback(&self) -> bool {
        self.fallback.is_some()
    }
}

/// Post-detection regression of the field: after a photon is detected the
/// normalized field is `1 + r·K(τ)`, with `r = Δα/α` the relative jump of
/// the field amplitude and `K` the regression kernel (`K(0) = 1`,
/// `K'(0) = 0`). g²(τ) = |1 + r·K(τ)|².
#[derive(Debug, Clone)]
pub struct Regression {
    /// Relative field jump Δα/α on detection.
    pub jump: C,
    kernel: KernelPropagator,
}

impl Regression {
    pub fn new(params: &RateParams, medium: &Medium) -> Result<Self> {
        let classes = medium.classes();
        if classes.iter().all(|c| c.coupling == 0.0) {
            // An empty cavity stays coherent; field fluctuations relax at κ.
            params.check_weak_drive()?;
            let mut v = vec![ZERO; 1 + classes.len()];
            v[0] = ONE;
            return Ok(Regression {
                jump: ZERO,
                kernel: KernelPropagator::with_initial(params, classes, &v),
            });
        }
        let (one, two) = steady_two_excitation(params, medium)?;
        let a = one.field;
        if a.norm() < 1e-15 {
            return Err(Error::UndefinedCorrelation(format!(
                "steady field amplitude {:e} vanishes",
                a.norm()
            )));
        }
        let a2 = a * a;
        let jump = std::f64::consts::SQRT_2 * two.two_photon / a2 - ONE;
        if jump.norm() < 1e-300 {
            return Err(Error::UndefinedCorrelation("detection leaves the field unchanged".into()));
        }
        let mut v = Vec::with_capacity(1 + classes.len());
        v.push(ONE);
        for (b_c, b_ss) in two.photon_bright.iter().zip(&one.polarization) {
            v.push((b_c / a2 - b_ss / a) / jump);
        }
        Ok(Regression {
            jump,
            kernel: KernelPropagator::with_initial(params, classes, &v),
        })
    }

    /// (K(τ), dK/dτ).
    pub fn kernel(&self, tau: f64) -> (C, C) {
        self.kernel.eval(tau)
    }

    pub fn g2(&self, tau: f64) -> f64 {
        (ONE + self.jump * self.kernel.eval(tau).0).norm_sqr()
    }
}

/// Steady state through second order in the drive.
pub fn steady_two_excitation(
    params: &RateParams,
    medium: &Medium,
) -> Result<(OneExcitationState, TwoExcitationState)> {
    params.check_weak_drive()?;
    let classes = medium.classes();
    let emitters = medium.emitters();
    let member = medium.membership();
    let k = classes.len();
    let eps = params.eps;
    let half_gamma = 0.5 * params.gamma;
    let cavity = params.kappa + im(params.delta_c);
    let sqrt2 = std::f64::consts::SQRT_2;

    let one = steady_one_excitation(params, classes);
    let a = one.field;

    // Two excited atoms in classes (k, l) decay at γ + i(Δ_k + Δ_l).
    let pair_class = |p: usize, q: usize| params.gamma + im(classes[p].detuning + classes[q].detuning);
    let s2: Vec<f64> = classes.iter().map(|c| c.coupling * c.coupling).collect();
    let sum_s2_over_d: Vec<C> = (0..k)
        .map(|kk| (0..k).map(|l| s2[l] / pair_class(kk, l)).sum())
        .collect();

    let mut x0 = Vec::with_capacity(emitters.len());
    let mut dj = Vec::with_capacity(emitters.len());
    let mut alpha = vec![ZERO; k];
    let mut beta = vec![ZERO; k];
    for (p, e) in emitters.iter().enumerate() {
        let kk = member[p];
        let xp = -e.coupling * a / (half_gamma + im(e.detuning));
        let g2 = e.coupling * e.coupling;
        let d = cavity + half_gamma + im(e.detuning) + sum_s2_over_d[kk] - 2.0 * g2 / pair_class(kk, kk);
        if d.norm() < 1e-300 {
            return Err(Error::SingularSystem(format!("emitter {p} has vanishing diagonal")));
        }
        alpha[kk] += e.multiplicity * e.coupling * eps * xp / d;
        beta[kk] += e.multiplicity * g2 / d;
        x0.push(xp);
        dj.push(d);
    }

    // Unknowns (A, T_1..T_K) with T_l = Σ_{p∈l} n_p g_p x_p.
    let n = 1 + k;
    let mut sys = DMatrix::from_element(n, n, ZERO);
    let mut rhs = DVector::from_element(n, ZERO);
    sys[(0, 0)] = 2.0 * cavity;
    for l in 0..k {
        sys[(0, l + 1)] = C::new(-sqrt2, 0.0);
    }
    rhs[0] = sqrt2 * eps * a;
    for l in 0..k {
        sys[(l + 1, 0)] = sqrt2 * beta[l];
        sys[(l + 1, l + 1)] += ONE;
        for mm in 0..k {
            sys[(l + 1, mm + 1)] += beta[l] / pair_class(l, mm);
        }
        rhs[l + 1] = alpha[l];
    }
    let sol = sys
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SingularSystem("second-order steady state (degenerate detuning classes?)".into()))?;
    let two_photon = sol[0];
    let t: Vec<C> = (0..k).map(|l| sol[l + 1]).collect();

    let photon_emitter: Vec<C> = emitters
        .iter()
        .enumerate()
        .map(|(p, e)| {
            let kk = member[p];
            let coupling_sum: C = (0..k).map(|l| t[l] / pair_class(kk, l)).sum();
            (eps * x0[p] - sqrt2 * e.coupling * two_photon - e.coupling * coupling_sum) / dj[p]
        })
        .collect();

    // Residual of the unreduced equations.
    let mut t_check = vec![ZERO; k];
    for (p, e) in emitters.iter().enumerate() {
        t_check[member[p]] += e.multiplicity * e.coupling * photon_emitter[p];
    }
    let scale = (eps * a.norm()).max(1e-300);
    let mut resid: f64 = (sqrt2 * eps * a + sqrt2 * t_check.iter().sum::<C>() - 2.0 * cavity * two_photon).norm();
    for (p, e) in emitters.iter().enumerate() {
        let kk = member[p];
        let g = e.coupling;
        let xp = photon_emitter[p];
        let others: C = (0..k)
            .map(|l| (xp * s2[l] + g * t_check[l]) / pair_class(kk, l))
            .sum::<C>()
            - 2.0 * g * g * xp / pair_class(kk, kk);
        let r = eps * x0[p] - sqrt2 * g * two_photon - (cavity + half_gamma + im(e.detuning)) * xp - others;
        resid = resid.max(r.norm());
    }
    let rel = resid / (scale * (params.kappa + params.gamma + params.g_max));
    if !(rel < 1e-10) {
        return Err(Error::SingularSystem(format!(
            "second-order steady state residual {rel:e} too large"
        )));
    }

    let photon_bright = classes
        .iter()
        .zip(&t_check)
        .map(|(cl, tk)| if cl.coupling > 0.0 { tk / cl.coupling } else { ZERO })
        .collect();
    let m = emitters.len();
    let mut pair_decay = Vec::with_capacity(m * m);
    for p in 0..m {
        for q in 0..m {
            pair_decay.push(pair_class(member[p], member[q]));
        }
    }
    let two = TwoExcitationState {
        two_photon,
        photon_bright,
        photon_emitter,
        couplings: emitters.iter().map(|e| e.coupling).collect(),
        pair_decay,
    };
    Ok((one, two))
}

/// g²(τ) by photon-conditioned regression of the first-order amplitudes.
pub fn g2_regression(params: &RateParams, medium: &Medium, tau: &[f64]) -> Result<CorrelationTrace> {
    g2_regression_with(params, medium, tau, Propagation::default())
}

pub fn g2_regression_with(
    params: &RateParams,
    medium: &Medium,
    tau: &[f64],
    method: Propagation,
) -> Result<CorrelationTrace> {
    let (one, two) = steady_two_excitation(params, medium)?;
    let a = one.field;
    if a.norm() < 1e-15 {
        return Err(Error::UndefinedCorrelation(format!(
            "steady field amplitude {:e} vanishes",
            a.norm()
        )));
    }
    // Detection maps the state to a|ψ⟩/a₁₀. Amplitudes are then expressed
    // in units of the steady field so that they are O(1).
    let a2 = a * a;
    let initial = OneExcitationState {
        field: std::f64::consts::SQRT_2 * two.two_photon / a2,
        polarization: two.photon_bright.iter().map(|b| b / a2).collect(),
    };
    let drive = C::new(params.eps, 0.0) / a;
    let states = propagate(params, medium.classes(), &initial, drive, tau, method)?;
    let g2 = states.iter().map(|s| s.field.norm_sqr()).collect();
    Ok(CorrelationTrace::deterministic(tau.to_vec(), g2))
}

/// Steady transmitted intensity versus drive detuning, with its peaks.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionSpectrum {
    /// Drive detuning from the reference frequency (rad/µs).
    pub detuning: Vec<f64>,
    /// |a₁_ss|².
    pub intensity: Vec<f64>,
    /// Refined peak positions, ascending.
    pub peaks: Vec<f64>,
}

impl TransmissionSpectrum {
    pub fn is_single_peak(&self) -> bool {
        self.peaks.len() < 2
    }

    /// Distance between the two strongest peaks (rad/µs).
    pub fn separation(&self, params: &RateParams, classes: &[DetuningClass]) -> Option<f64> {
        if self.peaks.len() < 2 {
            return None;
        }
        let mut ranked: Vec<(f64, f64)> = self
            .peaks
            .iter()
            .map(|&d| (transmission_at(params, classes, d), d))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        Some((ranked[0].1 - ranked[1].1).abs())
    }
}

/// |a₁_ss|² when the drive is shifted by `drive_detuning` from the
/// reference frequency.
pub fn transmission_at(params: &RateParams, classes: &[DetuningClass], drive_detuning: f64) -> f64 {
    let mut p = *params;
    p.delta_c -= drive_detuning;
    let shifted: Vec<DetuningClass> = classes
        .iter()
        .map(|c| DetuningClass {
            coupling: c.coupling,
            detuning: c.detuning - drive_detuning,
        })
        .collect();
    steady_one_excitation(&p, &shifted).field.norm_sqr()
}

pub fn transmission_spectrum(
    params: &RateParams,
    classes: &[DetuningClass],
    drive_detuning: &[f64],
) -> Result<TransmissionSpectrum> {
    params.validate()?;
    if drive_detuning.len() < 3 || drive_detuning.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter(
            "detuning grid needs at least 3 strictly ascending points".into(),
        ));
    }
    let g_tot = classes.iter().map(|c| c.coupling * c.coupling).sum::<f64>().sqrt();
    let (lo, hi) = (drive_detuning[0], drive_detuning[drive_detuning.len() - 1]);
    if lo > -2.0 * g_tot || hi < 2.0 * g_tot {
        return Err(Error::InvalidParameter(format!(
            "detuning grid [{lo}, {hi}] must span ±2·G = ±{}",
            2.0 * g_tot
        )));
    }
    let f = |d: f64| transmission_at(params, classes, d);
    let intensity: Vec<f64> = drive_detuning.iter().map(|&d| f(d)).collect();
    let mut peaks = Vec::new();
    for i in 1..intensity.len() - 1 {
        if intensity[i] > intensity[i - 1] && intensity[i] >= intensity[i + 1] {
            peaks.push(golden_max(&f, drive_detuning[i - 1], drive_detuning[i + 1]));
        }
    }
    Ok(TransmissionSpectrum {
        detuning: drive_detuning.to_vec(),
        intensity,
        peaks,
    })
}

/// Splitting between the two normal-mode frequencies of a single coupled
/// class, 2·Im Ω_VR. `None` in the overdamped regime.
pub fn normal_mode_splitting(params: &RateParams, classes: &[DetuningClass]) -> Option<f64> {
    let eig = generator(params, classes).schur().eigenvalues()?;
    let mut freqs: Vec<f64> = eig.iter().map(|l| l.im).collect();
    freqs.sort_by(f64::total_cmp);
    let spread = freqs[freqs.len() - 1] - freqs[0];
    (spread > 1e-9 * (params.kappa + params.gamma)).then_some(spread)
}

/// Golden-section search for the maximum of a unimodal function on [a, b].
pub(crate) fn golden_max<F: Fn(f64) -> f64>(f: &F, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= 1e-13 * (a.abs() + b.abs()).max(1e-12) {
            break;
        }
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

//! Run configuration: structured text parsing, defaults, and a validator
//! that reports every violated constraint in one pass.
//!
//! The file dialect is TOML. Top level key `mode` plus sections `graph`,
//! `agents`, `gains`, `sim`, `io`. Agents come either from a named preset or
//! as explicit initial states; explicit agents are pure integrator chains
//! with the sensor law `theta_k(t) = 1 + kappa_k |sin(10 t)|`.

use std::env;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use serde::Deserialize;

use crate::error::{CliError, ConfigError};
use crate::fleet::{
    manipulator_preset, manipulator_preset_seeded, AgentFleet, AgentModel, DynamicsFn,
    SensitivityFn,
};
use crate::sim::SimOptions;
use crate::synthesis::{
    synthesize_output_feedback, synthesize_practical, synthesize_state_feedback, SynthMode,
    SynthesisResult,
};
use crate::system::{build_system_matrices, SystemMatrices};
use crate::topology::GraphTopology;
use crate::warp::{GainSchedule, WarpMode};

/// Environment variable that switches the manipulator preset to randomly
/// drawn sensor amplitudes; its value is the draw seed.
pub const SEED_ENV_VAR: &str = "PENCIL_CONSENSUS_SEED";

const MODE_VALUES: &str = "state_feedback | output_feedback | practical";

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    mode: Option<String>,
    graph: Option<RawGraph>,
    agents: Option<RawAgents>,
    gains: Option<RawGains>,
    #[serde(default)]
    sim: RawSim,
    #[serde(default)]
    io: RawIo,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    adjacency: Option<Vec<Vec<u8>>>,
    pinning: Option<Vec<u8>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAgents {
    preset: Option<String>,
    /// Initial states, leader first; the row length is the state dimension.
    initials: Option<Vec<Vec<f64>>>,
    /// Sensor fluctuation amplitudes per agent, leader first.
    kappas: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGains {
    k: Option<Vec<f64>>,
    g: Option<Vec<f64>>,
    kappa0: Option<f64>,
    kappa_a: Option<f64>,
    kappa_margin: Option<f64>,
    c1: Option<f64>,
    horizon: Option<f64>,
    t_f: Option<f64>,
    delta: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSim {
    h_max: Option<f64>,
    h_frac: Option<f64>,
    eps_stop: Option<f64>,
    stride: Option<usize>,
    tol_rel: Option<f64>,
    t_end: Option<f64>,
    max_steps: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIo {
    outdir: Option<PathBuf>,
    plots: Option<bool>,
}

/// Where the fleet comes from.
#[derive(Debug, Clone)]
pub enum AgentSource {
    /// The five-manipulator demo fleet; honors [`SEED_ENV_VAR`].
    Preset,
    /// Integrator chains at the given initial states, leader first.
    Explicit {
        initials: Vec<Vec<f64>>,
        kappas: Vec<f64>,
    },
}

/// Optional per-run overrides of the grid defaults derived from the schedule.
#[derive(Debug, Clone, Default)]
pub struct SimOverrides {
    pub h_max: Option<f64>,
    pub h_frac: Option<f64>,
    pub eps_stop: Option<f64>,
    pub stride: Option<usize>,
    pub tol_rel: Option<f64>,
    pub t_end: Option<f64>,
    pub max_steps: Option<usize>,
}

impl SimOverrides {
    fn apply(&self, opts: &mut SimOptions<f64>) {
        if let Some(v) = self.h_max {
            opts.h_max = v;
        }
        if let Some(v) = self.h_frac {
            opts.h_frac = v;
        }
        if let Some(v) = self.eps_stop {
            opts.eps_stop = v;
        }
        if let Some(v) = self.stride {
            opts.stride = v;
        }
        if let Some(v) = self.tol_rel {
            opts.tol_rel = v;
        }
        if let Some(v) = self.t_end {
            opts.t_end = v;
        }
        if let Some(v) = self.max_steps {
            opts.max_steps = v;
        }
    }
}

/// A fully validated run description. Produced by [`parse_config`]; turned
/// into live objects by [`RunConfig::build`].
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: SynthMode,
    pub agents: AgentSource,
    /// Explicit communication graph; `None` means the preset's own graph.
    pub graph: Option<GraphTopology<f64>>,
    /// Controller gains; `None` falls back to the preset values.
    pub k: Option<Vec<f64>>,
    /// Observer injection gains; `None` falls back to the preset values.
    pub g: Option<Vec<f64>>,
    /// Decay parameter: `kappa0` in state feedback, `kappa_a` in output
    /// feedback, the post-freeze decay margin in the bounded-gain mode.
    pub kappa: f64,
    /// Contraction split between the estimation and consensus blocks.
    pub c1: f64,
    pub warp: WarpMode<f64>,
    pub sim: SimOverrides,
    pub outdir: PathBuf,
    pub plots: bool,
}

/// Command-line overrides applied before validation.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<String>,
    pub outdir: Option<PathBuf>,
    pub no_plots: bool,
}

/// Everything a simulation run needs, assembled and cross-checked.
pub struct Scenario {
    pub fleet: AgentFleet<f64>,
    pub sys: SystemMatrices<f64>,
    pub synthesis: SynthesisResult<f64>,
    pub sched: GainSchedule<f64>,
    pub opts: SimOptions<f64>,
}

/// Reads, parses and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    parse_config_with(path, &Overrides::default())
}

/// Same as [`parse_config`] with command-line overrides folded in before
/// validation, so an overridden mode is checked against the file's gains.
pub fn parse_config_with(path: &Path, over: &Overrides) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text, over)
}

fn parse_config_str(text: &str, over: &Overrides) -> Result<RunConfig, ConfigError> {
    let mut raw: RawConfig =
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    if let Some(mode) = &over.mode {
        raw.mode = Some(mode.clone());
    }
    if let Some(dir) = &over.outdir {
        raw.io.outdir = Some(dir.clone());
    }
    if over.no_plots {
        raw.io.plots = Some(false);
    }
    validate(raw)
}

fn validate(raw: RawConfig) -> Result<RunConfig, ConfigError> {
    let mut problems: Vec<String> = Vec::new();

    let mode = match raw.mode.as_deref() {
        None => {
            problems.push(format!("mode: required key is missing ({MODE_VALUES})"));
            None
        }
        Some("state_feedback") => Some(SynthMode::StateFeedback),
        Some("output_feedback") => Some(SynthMode::OutputFeedback),
        Some("practical") => Some(SynthMode::Practical),
        Some(other) => {
            problems.push(format!("mode: unknown value {other:?} ({MODE_VALUES})"));
            None
        }
    };

    // Agents determine the state dimension and follower count every later
    // length check needs, so broken agents suppress those checks instead of
    // cascading misleading reports.
    let mut n_dim: Option<usize> = None;
    let mut n_followers: Option<usize> = None;
    let agents = match &raw.agents {
        None => {
            problems.push("agents: section is missing (set agents.preset or agents.initials)".into());
            None
        }
        Some(a) => match (&a.preset, &a.initials) {
            (Some(_), Some(_)) => {
                problems.push("agents: preset and initials are mutually exclusive".into());
                None
            }
            (None, None) => {
                problems.push("agents: set either preset or initials".into());
                None
            }
            (Some(name), None) => {
                if a.kappas.is_some() {
                    problems.push(
                        "agents.kappas: not allowed together with a preset (the preset carries its own amplitudes)".into(),
                    );
                }
                if name == "manipulators" {
                    n_dim = Some(2);
                    n_followers = Some(4);
                    Some(AgentSource::Preset)
                } else {
                    problems.push(format!(
                        "agents.preset: unknown preset {name:?} (available: manipulators)"
                    ));
                    None
                }
            }
            (None, Some(init)) => {
                let mut ok = true;
                if init.len() < 2 {
                    problems
                        .push("agents.initials: need the leader plus at least one follower".into());
                    ok = false;
                }
                let n0 = init.first().map(Vec::len).unwrap_or(0);
                if n0 == 0 {
                    problems.push("agents.initials: state dimension must be positive".into());
                    ok = false;
                }
                for (i, row) in init.iter().enumerate() {
                    if row.len() != n0 {
                        problems.push(format!(
                            "agents.initials: row {i} has {} entries, expected {n0}",
                            row.len()
                        ));
                        ok = false;
                    }
                    if row.iter().any(|v| !v.is_finite()) {
                        problems.push(format!("agents.initials: row {i} has a non-finite entry"));
                        ok = false;
                    }
                }
                let kappas = match &a.kappas {
                    None => vec![0.0; init.len()],
                    Some(ks) => {
                        if ks.len() != init.len() {
                            problems.push(format!(
                                "agents.kappas: {} amplitudes for {} agents",
                                ks.len(),
                                init.len()
                            ));
                            ok = false;
                        }
                        for (i, kap) in ks.iter().enumerate() {
                            if !kap.is_finite() || kap.abs() >= 1.0 {
                                problems.push(format!(
                                    "agents.kappas: entry {i} must be finite with magnitude below 1, got {kap}"
                                ));
                                ok = false;
                            }
                        }
                        ks.clone()
                    }
                };
                if ok {
                    n_dim = Some(n0);
                    n_followers = Some(init.len() - 1);
                    Some(AgentSource::Explicit {
                        initials: init.clone(),
                        kappas,
                    })
                } else {
                    None
                }
            }
        },
    };

    let graph = match (&raw.graph, &agents) {
        (None, Some(AgentSource::Explicit { .. })) => {
            problems.push(
                "graph: section is missing (adjacency and pinning are required unless a preset is used)".into(),
            );
            None
        }
        (None, _) => None,
        (Some(g), _) => match (&g.adjacency, &g.pinning) {
            (Some(adj), Some(pin)) => match GraphTopology::new(adj, pin) {
                Ok(topo) => {
                    if let Some(nf) = n_followers {
                        if topo.n_followers() != nf {
                            problems.push(format!(
                                "graph.adjacency: describes {} followers but the agents section has {nf}",
                                topo.n_followers()
                            ));
                        }
                    }
                    Some(topo)
                }
                Err(e) => {
                    problems.push(format!("graph: {e}"));
                    None
                }
            },
            missing => {
                if missing.0.is_none() {
                    problems.push("graph.adjacency: required".into());
                }
                if missing.1.is_none() {
                    problems.push("graph.pinning: required".into());
                }
                None
            }
        },
    };

    let graw = raw.gains.unwrap_or_default();
    let check_gain_vec = |problems: &mut Vec<String>, name: &str, v: &[f64]| {
        if let Some(n) = n_dim {
            if v.len() != n {
                problems.push(format!(
                    "gains.{name}: length {} does not match state dimension {n}",
                    v.len()
                ));
            }
        }
        if v.iter().any(|x| !x.is_finite()) {
            problems.push(format!("gains.{name}: entries must be finite"));
        }
    };
    if let Some(k) = &graw.k {
        check_gain_vec(&mut problems, "k", k);
    } else if matches!(agents, Some(AgentSource::Explicit { .. })) {
        problems.push("gains.k: required (only presets carry default gains)".into());
    }
    if let Some(g) = &graw.g {
        check_gain_vec(&mut problems, "g", g);
    } else if matches!(agents, Some(AgentSource::Explicit { .. }))
        && !matches!(mode, Some(SynthMode::StateFeedback))
    {
        problems.push("gains.g: required in the observer modes".into());
    }

    let require_positive = |problems: &mut Vec<String>, name: &str, v: Option<f64>| match v {
        None => {
            problems.push(format!("gains.{name}: required in this mode"));
            None
        }
        Some(x) if !x.is_finite() || x <= 0.0 => {
            problems.push(format!("gains.{name}: must be positive and finite, got {x}"));
            None
        }
        Some(x) => Some(x),
    };
    let kappa = match mode {
        Some(SynthMode::StateFeedback) => require_positive(&mut problems, "kappa0", graw.kappa0),
        Some(SynthMode::OutputFeedback) => require_positive(&mut problems, "kappa_a", graw.kappa_a),
        Some(SynthMode::Practical) => {
            require_positive(&mut problems, "kappa_margin", graw.kappa_margin)
        }
        None => None,
    };

    let c1 = match graw.c1 {
        None => Some(0.9),
        Some(x) if x.is_finite() && x > 0.0 && x < 1.0 => Some(x),
        Some(x) => {
            problems.push(format!(
                "gains.c1: must lie strictly between 0 and 1, got {x}"
            ));
            None
        }
    };

    let warp = match mode {
        Some(SynthMode::Practical) => {
            if graw.horizon.is_some() {
                problems.push(
                    "gains.horizon: derived as t_f + delta in practical mode; remove it".into(),
                );
            }
            let t_f = require_positive(&mut problems, "t_f", graw.t_f);
            let delta = require_positive(&mut problems, "delta", graw.delta);
            match (t_f, delta) {
                (Some(t_f), Some(delta)) => Some(WarpMode::Practical { t_f, delta }),
                _ => None,
            }
        }
        Some(_) => {
            if graw.t_f.is_some() || graw.delta.is_some() {
                problems.push(
                    "gains.t_f, gains.delta: only meaningful in practical mode".into(),
                );
            }
            require_positive(&mut problems, "horizon", graw.horizon)
                .map(|horizon| WarpMode::Exact { horizon })
        }
        None => None,
    };

    let sim = raw.sim;
    if let Some(h) = sim.h_max {
        if !h.is_finite() || h <= 0.0 {
            problems.push(format!("sim.h_max: must be positive and finite, got {h}"));
        }
    }
    if let Some(f) = sim.h_frac {
        if !f.is_finite() || f <= 0.0 || f >= 1.0 {
            problems.push(format!(
                "sim.h_frac: must lie strictly between 0 and 1, got {f}"
            ));
        }
    }
    if let Some(e) = sim.eps_stop {
        if !e.is_finite() || e <= 0.0 {
            problems.push(format!("sim.eps_stop: must be positive and finite, got {e}"));
        } else if let Some(WarpMode::Exact { horizon }) = warp {
            if e >= horizon {
                problems.push(format!(
                    "sim.eps_stop: stop margin {e} must be below the horizon {horizon}"
                ));
            }
        }
    }
    if let Some(tol) = sim.tol_rel {
        if !tol.is_finite() || tol < 0.0 {
            problems.push(format!(
                "sim.tol_rel: must be nonnegative and finite, got {tol}"
            ));
        }
    }
    if let Some(t_end) = sim.t_end {
        match warp {
            Some(WarpMode::Practical { t_f, .. }) => {
                if !t_end.is_finite() || t_end <= t_f {
                    problems.push(format!(
                        "sim.t_end: must be finite and beyond the freeze time {t_f}, got {t_end}"
                    ));
                }
            }
            Some(WarpMode::Exact { .. }) => {
                problems.push("sim.t_end: only meaningful in practical mode".into());
            }
            None => {}
        }
    }
    if sim.max_steps == Some(0) {
        problems.push("sim.max_steps: must be at least 1".into());
    }

    let outdir = raw.io.outdir.unwrap_or_else(|| PathBuf::from("out"));
    if outdir.as_os_str().is_empty() {
        problems.push("io.outdir: must not be empty".into());
    }
    let plots = raw.io.plots.unwrap_or(true);

    if !problems.is_empty() {
        return Err(ConfigError::Validation(problems));
    }
    Ok(RunConfig {
        mode: mode.expect("validated"),
        agents: agents.expect("validated"),
        graph,
        k: graw.k,
        g: graw.g,
        kappa: kappa.expect("validated"),
        c1: c1.expect("validated"),
        warp: warp.expect("validated"),
        sim: SimOverrides {
            h_max: sim.h_max,
            h_frac: sim.h_frac,
            eps_stop: sim.eps_stop,
            stride: sim.stride,
            tol_rel: sim.tol_rel,
            t_end: sim.t_end,
            max_steps: sim.max_steps,
        },
        outdir,
        plots,
    })
}

fn seed_from_env() -> Result<Option<u64>, CliError> {
    match env::var(SEED_ENV_VAR) {
        Err(env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::Usage(format!("{SEED_ENV_VAR}: {e}"))),
        Ok(v) => v.trim().parse::<u64>().map(Some).map_err(|_| {
            CliError::Usage(format!(
                "{SEED_ENV_VAR}: expected an unsigned integer seed, got {v:?}"
            ))
        }),
    }
}

impl RunConfig {
    /// Built-in five-manipulator scenario: bounded-gain synthesis with the
    /// deadline split t_f = 1.98, delta = 0.02 and a 0.5 decay margin.
    pub fn demo_manipulators() -> Self {
        RunConfig {
            mode: SynthMode::Practical,
            agents: AgentSource::Preset,
            graph: None,
            k: None,
            g: None,
            kappa: 0.5,
            c1: 0.9,
            warp: WarpMode::Practical {
                t_f: 1.98,
                delta: 0.02,
            },
            sim: SimOverrides::default(),
            outdir: PathBuf::from("out"),
            plots: true,
        }
    }

    /// Builds the fleet, synthesizes the gains and derives the grid options.
    pub fn build(&self) -> Result<Scenario, CliError> {
        let (mut fleet, k_preset, g_preset) = match &self.agents {
            AgentSource::Preset => {
                let preset = match seed_from_env()? {
                    Some(seed) => manipulator_preset_seeded(seed),
                    None => manipulator_preset(),
                };
                (preset.fleet, Some(preset.k_gain), Some(preset.g_gain))
            }
            AgentSource::Explicit { initials, kappas } => {
                let n = initials[0].len();
                let mut agents = Vec::with_capacity(initials.len());
                for (i, (row, &kap)) in initials.iter().zip(kappas).enumerate() {
                    let f: DynamicsFn<f64> = Arc::new(move |_t, _x| DVector::zeros(n));
                    let sens: SensitivityFn<f64> =
                        Arc::new(move |t: f64| 1.0 + kap * (10.0 * t).sin().abs());
                    agents.push(AgentModel::new(
                        i,
                        n,
                        f,
                        sens,
                        kap.abs(),
                        Some(vec![0.0; n]),
                        DVector::from_row_slice(row),
                    )?);
                }
                let leader = agents.remove(0);
                let topo = self
                    .graph
                    .clone()
                    .ok_or_else(|| CliError::Usage("explicit agents need a graph".into()))?;
                (AgentFleet::new(leader, agents, topo)?, None, None)
            }
        };
        if let (AgentSource::Preset, Some(topo)) = (&self.agents, &self.graph) {
            fleet = AgentFleet::new(
                fleet.leader().clone(),
                fleet.followers().to_vec(),
                topo.clone(),
            )?;
        }

        let n = fleet.leader().n();
        let k = self
            .k
            .clone()
            .or(k_preset)
            .ok_or_else(|| CliError::Usage("gains.k unresolved".into()))?;
        // State feedback never evaluates the observer path, so any stable
        // placeholder would do; ones keep the report values recognizable.
        let g = self
            .g
            .clone()
            .or(g_preset)
            .unwrap_or_else(|| vec![1.0; n]);
        let rho = fleet.follower_growth_rates();
        let sys = build_system_matrices(n, fleet.topology(), &k, &g, rho.as_deref())?;

        let dtheta = fleet.follower_dthetas();
        let synthesis = match (self.mode, self.warp) {
            (SynthMode::StateFeedback, WarpMode::Exact { horizon }) => {
                synthesize_state_feedback(&sys, self.kappa, horizon)?
            }
            (SynthMode::OutputFeedback, WarpMode::Exact { horizon }) => {
                synthesize_output_feedback(&sys, self.kappa, self.c1, horizon, &dtheta)?
            }
            (SynthMode::Practical, WarpMode::Practical { t_f, delta }) => {
                synthesize_practical(&sys, t_f, delta, self.kappa, self.c1, &dtheta)?
            }
            _ => {
                return Err(CliError::Usage(
                    "mode and deadline specification disagree".into(),
                ))
            }
        };
        let sched = GainSchedule::new(self.warp, synthesis.b, n)?;
        let mut opts = SimOptions::for_schedule(&sched);
        self.sim.apply(&mut opts);
        Ok(Scenario {
            fleet,
            sys,
            synthesis,
            sched,
            opts,
        })
    }
}

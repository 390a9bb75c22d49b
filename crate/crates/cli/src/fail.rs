use jampr::env::EnvError;
use jampr::model::ModelError;
use jampr::nn::CheckpointError;
use jampr::train::TrainError;

/// Command failure, mapped to the process exit code.
#[derive(Debug)]
pub enum Fail {
    /// Bad arguments or incompatible inputs (exit 1).
    Usage(String),
    /// Infeasible instance or invalid solution (exit 2).
    Infeasible(String),
    /// IO or parse error (exit 3).
    Io(anyhow::Error),
}

impl Fail {
    pub fn code(&self) -> i32 {
        match self {
            Fail::Usage(_) => 1,
            Fail::Infeasible(_) => 2,
            Fail::Io(_) => 3,
        }
    }
}

impl std::fmt::Display for Fail {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Fail::Usage(m) => write!(f, "{m}"),
            Fail::Infeasible(m) => write!(f, "{m}"),
            Fail::Io(e) => write!(f, "{e:#}"),
        }
    }
}

fn env_fail(e: &EnvError) -> Fail {
    match e {
        EnvError::InfeasibleState { .. }
        | EnvError::InfeasibleAction { .. }
        | EnvError::InfeasibleSolution(_) => Fail::Infeasible(e.to_string()),
        _ => Fail::Usage(e.to_string()),
    }
}

fn model_fail(e: &ModelError) -> Option<Fail> {
    match e {
        ModelError::Env(e) => Some(env_fail(e)),
        ModelError::Config(m) => Some(Fail::Usage(m.clone())),
        ModelError::Checkpoint(CheckpointError::Mismatch(m)) => {
            Some(Fail::Usage(format!("checkpoint mismatch: {m}")))
        }
        _ => None,
    }
}

impl From<anyhow::Error> for Fail {
    fn from(e: anyhow::Error) -> Self {
        for cause in e.chain() {
            if let Some(env) = cause.downcast_ref::<EnvError>() {
                return env_fail(env);
            }
            if let Some(f) = cause.downcast_ref::<ModelError>().and_then(model_fail) {
                return f;
            }
            match cause.downcast_ref::<TrainError>() {
                Some(TrainError::Model(m)) => {
                    if let Some(f) = model_fail(m) {
                        return f;
                    }
                }
                Some(TrainError::Config(m)) => return Fail::Usage(m.clone()),
                _ => {}
            }
        }
        Fail::Io(e)
    }
}

impl From<ModelError> for Fail {
    fn from(e: ModelError) -> Self {
        anyhow::Error::new(e).into()
    }
}

impl From<EnvError> for Fail {
    fn from(e: EnvError) -> Self {
        env_fail(&e)
    }
}

impl From<TrainError> for Fail {
    fn from(e: TrainError) -> Self {
        anyhow::Error::new(e).into()
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail::Io(e.into())
    }
}

use std::path::PathBuf;

use fedlitecan::config::ConfigError;
use fedlitecan::data::DataError;
use fedlitecan::federated::FedError;
use fedlitecan::model::ModelError;
use fedlitecan::training::{MetricsError, TrainError};
use thiserror::Error;

/// Command failures, grouped by the exit code they map to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric divergence: {0}")]
    Diverged(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::Io { .. } | CliError::Internal(_) => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        // an unreadable config file is still a configuration problem
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) | DataError::ConfigFile(_) => CliError::Config(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            ModelError::Checkpoint(_) | ModelError::Io { .. } | ModelError::InputShape { .. } => {
                CliError::Data(e.to_string())
            }
            ModelError::Tensor(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Metrics(m) => m.into(),
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::EmptyData(_) => CliError::Data(e.to_string()),
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            TrainError::Tensor(_) | TrainError::Io(_) | TrainError::History { .. } => CliError::Internal(e.to_string()),
        }
    }
}

impl From<FedError> for CliError {
    fn from(e: FedError) -> Self {
        match e {
            FedError::Config(_) => CliError::Config(e.to_string()),
            FedError::EmptyClient { .. } => CliError::Data(e.to_string()),
            FedError::Client { ref source, .. } => {
                let message = e.to_string();
                match CliError::from_train_ref(source) {
                    2 => CliError::Config(message),
                    3 => CliError::Data(message),
                    4 => CliError::Diverged(message),
                    _ => CliError::Internal(message),
                }
            }
            FedError::Train(t) => t.into(),
            FedError::Aggregate(_) | FedError::Io(_) | FedError::Report { .. } => CliError::Internal(e.to_string()),
        }
    }
}

impl CliError {
    /// Exit code a training error would map to, without consuming it.
    fn from_train_ref(e: &TrainError) -> i32 {
        match e {
            TrainError::Config(_) => 2,
            TrainError::EmptyData(_) | TrainError::Metrics(_) => 3,
            TrainError::Model(ModelError::Config(_)) => 2,
            TrainError::Model(ModelError::Checkpoint(_) | ModelError::Io { .. } | ModelError::InputShape { .. }) => 3,
            TrainError::Diverged { .. } => 4,
            _ => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(
            CliError::from(ConfigError::Syntax {
                line: 1,
                message: "x".into()
            })
            .exit_code(),
            2
        );
        assert_eq!(CliError::from(DataError::Config("x".into())).exit_code(), 2);
        assert_eq!(
            CliError::from(DataError::TooFewMessages { n: 1, window: 10 }).exit_code(),
            3
        );
        assert_eq!(
            CliError::from(ModelError::Checkpoint("bad magic".into())).exit_code(),
            3
        );
        let diverged = TrainError::Diverged {
            epoch: 2,
            detail: "loss is NaN".into(),
        };
        assert_eq!(CliError::from(diverged).exit_code(), 4);
        let client = FedError::Client {
            round: 1,
            client: 0,
            source: TrainError::Diverged {
                epoch: 1,
                detail: "inf".into(),
            },
        };
        let e = CliError::from(client);
        assert_eq!(e.exit_code(), 4);
        assert!(e.to_string().contains("client 0"), "{e}");
        assert_eq!(CliError::from(FedError::Config("x".into())).exit_code(), 2);
    }
}

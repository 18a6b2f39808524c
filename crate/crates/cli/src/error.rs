use std::fmt;

use eak_core::atlas::AtlasError;
use eak_core::blocks::BlockError;
use eak_core::classify::ClassifyError;
use eak_core::features::FeatureError;
use eak_core::io::IoError;
use eak_core::rfe::RfeError;
use eak_core::stats::StatsError;
use eak_core::svm::SvmError;
use eak_core::synth::SynthError;
use eak_core::volume::VolumeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Data,
    Numerical,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Numerical => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self {
            kind: Kind::Config,
            message: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self {
            kind: Kind::Data,
            message: msg.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn volume_kind(e: &VolumeError) -> Kind {
    match e {
        VolumeError::NonFinite(_) => Kind::Numerical,
        _ => Kind::Data,
    }
}

fn svm_kind(e: &SvmError) -> Kind {
    match e {
        SvmError::InvalidConfig(_) | SvmError::NonLinearKernel | SvmError::TooFewFolds(_) => Kind::Config,
        SvmError::NoConvergence { .. } => Kind::Numerical,
        _ => Kind::Data,
    }
}

fn feature_kind(e: &FeatureError) -> Kind {
    match e {
        FeatureError::Volume(v) => volume_kind(v),
        _ => Kind::Data,
    }
}

macro_rules! classify_error {
    ($t:ty, $f:expr) => {
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                let kind: fn(&$t) -> Kind = $f;
                CliError {
                    kind: kind(&e),
                    message: e.to_string(),
                }
            }
        }
    };
}

classify_error!(VolumeError, volume_kind);
classify_error!(IoError, |_| Kind::Data);
classify_error!(BlockError, |_| Kind::Data);
classify_error!(FeatureError, feature_kind);
classify_error!(SvmError, svm_kind);
classify_error!(RfeError, |e| match e {
    RfeError::Svm(s) => svm_kind(s),
    RfeError::Feature(f) => feature_kind(f),
    RfeError::InvalidSchedule(_) => Kind::Config,
    _ => Kind::Data,
});
classify_error!(AtlasError, |e| match e {
    AtlasError::InvalidThreshold(_) => Kind::Config,
    AtlasError::Volume(v) => volume_kind(v),
    _ => Kind::Data,
});
classify_error!(StatsError, |e| match e {
    StatsError::Volume(v) => volume_kind(v),
    _ => Kind::Data,
});
classify_error!(ClassifyError, |e| match e {
    ClassifyError::Svm(s) => svm_kind(s),
    ClassifyError::EmptyGrid => Kind::Config,
    _ => Kind::Data,
});
classify_error!(SynthError, |e| match e {
    SynthError::Config(_) => Kind::Config,
    _ => Kind::Data,
});

pub fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

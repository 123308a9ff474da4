use fmap_core::FmapError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// A core error tagged with the pipeline stage that raised it.
#[derive(Debug, thiserror::Error)]
#[error("{stage}: {source}")]
pub struct CliError {
    pub stage: String,
    #[source]
    pub source: FmapError,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match &self.source {
            FmapError::Argument(_) => EXIT_USAGE,
            e if e.is_numerical() => EXIT_NUMERICAL,
            _ => EXIT_DATA,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub trait Stage<T> {
    fn stage(self, stage: impl Into<String>) -> CliResult<T>;
}

impl<T> Stage<T> for fmap_core::Result<T> {
    fn stage(self, stage: impl Into<String>) -> CliResult<T> {
        self.map_err(|source| CliError {
            stage: stage.into(),
            source,
        })
    }
}

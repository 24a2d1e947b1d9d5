use thiserror::Error;
#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("placeholder")]
    Placeholder,
}
impl ExperimentError {
    pub fn exit_code(&self) -> i32 { 2 }
}

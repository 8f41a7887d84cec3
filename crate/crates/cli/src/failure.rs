use tdc_core::curation::CurationError;
use tdc_core::pipeline::PipelineError;

pub const CONFIG: u8 = 2;
pub const DATA: u8 = 3;
pub const STAGE: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub trait Tag<T> {
    fn code(self, code: u8) -> CmdResult<T>;

    fn config(self) -> CmdResult<T>
    where
        Self: Sized,
    {
        self.code(CONFIG)
    }

    fn data(self) -> CmdResult<T>
    where
        Self: Sized,
    {
        self.code(DATA)
    }

    fn stage(self) -> CmdResult<T>
    where
        Self: Sized,
    {
        self.code(STAGE)
    }
}

impl<T, E: Into<anyhow::Error>> Tag<T> for Result<T, E> {
    fn code(self, code: u8) -> CmdResult<T> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

pub fn fail<T>(code: u8, message: impl std::fmt::Display) -> CmdResult<T> {
    Err(Failure { code, error: anyhow::anyhow!("{message}") })
}

pub fn curation<T>(r: Result<T, CurationError>) -> CmdResult<T> {
    let code = match &r {
        Ok(_) => return r.code(0),
        Err(CurationError::KeepFraction(_) | CurationError::ZeroCap | CurationError::Threshold(_)) => CONFIG,
        Err(CurationError::Provider(_) | CurationError::TooMany { .. }) => STAGE,
        Err(_) => DATA,
    };
    r.code(code)
}

pub fn pipeline<T>(r: Result<T, PipelineError>) -> CmdResult<T> {
    match r {
        Ok(v) => Ok(v),
        Err(e) => {
            let code = e.kind.exit_code() as u8;
            Err(Failure { code, error: e.into() })
        }
    }
}

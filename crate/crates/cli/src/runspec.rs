use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// A tuner plus its query budget, written `method@budget` (e.g. `cmaes@200`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RunSpec {
    pub method: MethodName,
    pub budget: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodName {
    Cmaes,
    Random,
    Greedy,
    Rl,
    /// Renders the pair's recorded goal parameters; synthetic pairs only.
    Oracle,
}

impl MethodName {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::Cmaes => "cmaes",
            MethodName::Random => "random",
            MethodName::Greedy => "greedy",
            MethodName::Rl => "rl",
            MethodName::Oracle => "oracle",
        }
    }

    fn default_budget(self) -> usize {
        match self {
            MethodName::Cmaes | MethodName::Random | MethodName::Greedy => 200,
            MethodName::Rl => 10,
            MethodName::Oracle => 1,
        }
    }
}

impl RunSpec {
    pub fn parse(s: &str) -> Result<Self, String> {
        let (name, budget) = match s.split_once('@') {
            Some((n, b)) => (n, Some(b)),
            None => (s, None),
        };
        let method = match name.trim().to_ascii_lowercase().as_str() {
            "cmaes" | "cma-es" => MethodName::Cmaes,
            "random" => MethodName::Random,
            "greedy" => MethodName::Greedy,
            "rl" => MethodName::Rl,
            "oracle" => MethodName::Oracle,
            other => {
                return Err(format!(
                    "unknown method '{other}' (expected cmaes, random, greedy, rl or oracle)"
                ))
            }
        };
        let budget = match budget {
            None => method.default_budget(),
            Some(b) => b
                .trim()
                .parse::<usize>()
                .map_err(|_| format!("invalid budget '{b}' in '{s}'"))?,
        };
        if budget == 0 {
            return Err(format!("budget must be positive in '{s}'"));
        }
        Ok(Self { method, budget })
    }

    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for RunSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.method.as_str(), self.budget)
    }
}

impl FromStr for RunSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::parse(s)
    }
}

impl TryFrom<String> for RunSpec {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        Self::parse(&s)
    }
}

impl From<RunSpec> for String {
    fn from(r: RunSpec) -> String {
        r.to_string()
    }
}

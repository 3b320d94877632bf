use std::fmt;

/// One named check with its worst violation.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst violation magnitude (0 when nothing was violated).
    pub violation: f64,
    /// Node, particle, or cell index where the worst violation occurred.
    pub location: Option<String>,
    pub tolerance: f64,
}

impl Check {
    /// Passes iff `violation <= tolerance`.
    pub fn against(
        name: impl Into<String>,
        violation: f64,
        tolerance: f64,
        location: Option<String>,
    ) -> Self {
        Self {
            name: name.into(),
            passed: violation <= tolerance,
            violation,
            location,
            tolerance,
        }
    }

    pub fn flag(name: impl Into<String>, passed: bool, detail: Option<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            violation: if passed { 0.0 } else { 1.0 },
            location: detail,
            tolerance: 0.0,
        }
    }
}

/// Collection of checks; the verdict is the AND of all of them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckReport {
    pub checks: Vec<Check>,
}

impl CheckReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, check: Check) {
        self.checks.push(check);
    }

    pub fn extend(&mut self, other: CheckReport) {
        self.checks.extend(other.checks);
    }

    /// Prefix every check name with `scope.`.
    pub fn scoped(mut self, scope: &str) -> Self {
        for c in &mut self.checks {
            c.name = format!("{scope}.{}", c.name);
        }
        self
    }

    pub fn verdict(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for CheckReport {
    /// `name = pass|fail; violation = ..; tolerance = ..; at = ..`, one line per check.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            write!(
                f,
                "{} = {}; violation = {:e}; tolerance = {:e}",
                c.name,
                if c.passed { "pass" } else { "fail" },
                c.violation,
                c.tolerance
            )?;
            if let Some(loc) = &c.location {
                write!(f, "; at = {loc}")?;
            }
            writeln!(f)?;
        }
        writeln!(
            f,
            "verdict = {}",
            if self.verdict() { "pass" } else { "fail" }
        )
    }
}

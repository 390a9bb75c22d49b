//! Reader for the Solomon VRPTW benchmark layout.
//!
//! ```text
//! R201
//!
//! VEHICLE
//! NUMBER     CAPACITY
//!   25         1000
//!
//! CUSTOMER
//! CUST NO.  XCOORD.  YCOORD.  DEMAND  READY TIME  DUE DATE  SERVICE TIME
//!     0      35       35        0        0         1000        0
//!     1      41       49       10      707          848       10
//! ```

use crate::instance::{cell, Instance, InstanceError, Node, ProblemKind};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolomonOptions {
    /// Treat DUE DATE as the latest service completion and store
    /// `b_i = DUE DATE - SERVICE TIME`. Off by default: DUE DATE is `b_i`.
    pub due_as_completion: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolomonFile {
    pub name: String,
    pub vehicles: usize,
    pub instance: Instance,
}

/// Parses a Solomon file with default options.
pub fn parse_solomon(text: &str) -> Result<Instance, InstanceError> {
    parse_solomon_file(text, SolomonOptions::default()).map(|f| f.instance)
}

pub fn parse_solomon_file(text: &str, opts: SolomonOptions) -> Result<SolomonFile, InstanceError> {
    let err = |line: usize, msg: &str| InstanceError::Parse {
        line,
        msg: msg.to_string(),
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (_, name) = lines.next().ok_or_else(|| err(1, "empty file"))?;
    let name = name.to_string();

    let (ln, l) = lines
        .next()
        .ok_or_else(|| err(0, "missing VEHICLE section"))?;
    if !l.eq_ignore_ascii_case("VEHICLE") {
        return Err(err(ln, "expected `VEHICLE`"));
    }
    let (ln, l) = lines
        .next()
        .ok_or_else(|| err(0, "missing vehicle header"))?;
    if !l.to_ascii_uppercase().starts_with("NUMBER") {
        return Err(err(ln, "expected `NUMBER CAPACITY` header"));
    }
    let (ln, l) = lines.next().ok_or_else(|| err(0, "missing vehicle data"))?;
    let v: Vec<&str> = l.split_whitespace().collect();
    if v.len() != 2 {
        return Err(err(ln, "expected vehicle count and capacity"));
    }
    let vehicles: usize = cell(ln, v[0])?;
    let capacity: f64 = cell(ln, v[1])?;

    let (ln, l) = lines
        .next()
        .ok_or_else(|| err(0, "missing CUSTOMER section"))?;
    if !l.eq_ignore_ascii_case("CUSTOMER") {
        return Err(err(ln, "expected `CUSTOMER`"));
    }
    let (ln, l) = lines
        .next()
        .ok_or_else(|| err(0, "missing customer header"))?;
    if !l.to_ascii_uppercase().starts_with("CUST") {
        return Err(err(ln, "expected customer column header"));
    }

    let mut rows: Vec<(usize, Node)> = Vec::new();
    for (ln, l) in lines {
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 7 {
            return Err(err(ln, &format!("expected 7 columns, found {}", f.len())));
        }
        let vals: Vec<f64> = f.iter().map(|s| cell(ln, s)).collect::<Result<_, _>>()?;
        let id: usize = cell(ln, f[0])?;
        let service = vals[6];
        let due = if opts.due_as_completion {
            vals[5] - service
        } else {
            vals[5]
        };
        rows.push((
            ln,
            Node {
                id,
                x: vals[1],
                y: vals[2],
                demand: vals[3],
                tw_start: vals[4],
                tw_end: due,
                service,
            },
        ));
    }
    rows.sort_by_key(|(_, n)| n.id);
    for (expect, (ln, n)) in rows.iter().enumerate() {
        if n.id != expect {
            let msg = if expect == 0 {
                "missing depot row (CUST NO. 0)".to_string()
            } else {
                format!(
                    "customer numbers not contiguous: expected {expect}, found {}",
                    n.id
                )
            };
            return Err(err(*ln, &msg));
        }
    }
    if rows.is_empty() {
        return Err(err(0, "missing depot row (CUST NO. 0)"));
    }
    let nodes = rows.into_iter().map(|(_, n)| n).collect();
    let instance = Instance::new(nodes, capacity, ProblemKind::Cvrptw, 0)?;
    Ok(SolomonFile {
        name,
        vehicles,
        instance,
    })
}

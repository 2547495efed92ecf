//! Shared domain types, the file operation instruction (FOI) set, and the
//! compiler from user-level operations to FOI sequences.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longest storage path accepted anywhere in the system, in bytes.
pub const MAX_PATH_BYTES: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("unknown operation `{0}`")]
    UnknownOperation(String),
    #[error("operation `{0}` is a basic operation, not cloud-assisted")]
    NotCloudAssisted(Action),
    #[error("transfer operations are compiled by the agent, not the FOI compiler")]
    TransferNotCompilable,
    #[error("operation `{action}` is missing argument `{arg}`")]
    MissingArgument { action: Action, arg: &'static str },
    #[error("invalid path `{path}`: {reason}")]
    InvalidPath { path: String, reason: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileKind {
    File,
    Folder,
}

/// Metadata for one entry of an account's storage. Never carries content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileMeta {
    pub path: String,
    pub name: String,
    pub kind: FileKind,
    pub size_bytes: u64,
    pub modified_at: u64,
    pub revision: String,
}

/// Checks that `path` is an absolute, `/`-separated storage path with no
/// empty, `.` or `..` components.
pub fn validate_path(path: &str) -> Result<(), DomainError> {
    let invalid = |reason| DomainError::InvalidPath { path: path.to_string(), reason };
    if path.len() > MAX_PATH_BYTES {
        return Err(invalid("longer than 4096 bytes"));
    }
    if !path.starts_with('/') {
        return Err(invalid("must be absolute"));
    }
    if path.contains('\\') || path.contains('\0') {
        return Err(invalid("contains a forbidden character"));
    }
    if path == "/" {
        return Ok(());
    }
    for segment in path[1..].split('/') {
        match segment {
            "" => return Err(invalid("empty path component")),
            "." | ".." => return Err(invalid("relative path component")),
            _ => {}
        }
    }
    Ok(())
}

/// Final component of a storage path (`""` for the root).
pub fn basename(path: &str) -> &str {
    path.rsplit('/').next().unwrap_or("")
}

/// Parent folder of a storage path; the root is its own parent.
pub fn parent(path: &str) -> &str {
    match path.rfind('/') {
        Some(0) | None => "/",
        Some(i) => &path[..i],
    }
}

pub fn join(folder: &str, name: &str) -> String {
    if folder.ends_with('/') {
        format!("{folder}{name}")
    } else {
        format!("{folder}/{name}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FoiVerb {
    Download,
    Get,
    Put,
    Op,
    Push,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Compress,
    Encrypt,
    Convert,
}

impl OpKind {
    /// Suffix appended to the basename of the op's output file.
    pub fn suffix(self) -> &'static str {
        match self {
            OpKind::Compress => "gz",
            OpKind::Encrypt => "enc",
            OpKind::Convert => "small",
        }
    }
}

/// One file operation instruction.
///
/// `op` instructions name their input file in `target` and their output
/// file in the `output` parameter. `push` names the file sent back to the
/// requesting agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Foi {
    pub verb: FoiVerb,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op_kind: Option<OpKind>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub op_params: BTreeMap<String, String>,
}

impl Foi {
    pub fn download(url: impl Into<String>) -> Self {
        Self::plain(FoiVerb::Download, url)
    }

    pub fn get(path: impl Into<String>) -> Self {
        Self::plain(FoiVerb::Get, path)
    }

    pub fn put(path: impl Into<String>) -> Self {
        Self::plain(FoiVerb::Put, path)
    }

    pub fn push(file: impl Into<String>) -> Self {
        Self::plain(FoiVerb::Push, file)
    }

    pub fn op(kind: OpKind, input: impl Into<String>, output: impl Into<String>) -> Self {
        let mut op_params = BTreeMap::new();
        op_params.insert("output".to_string(), output.into());
        Foi { verb: FoiVerb::Op, target: input.into(), op_kind: Some(kind), op_params }
    }

    pub fn with_param(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.op_params.insert(key.into(), value.into());
        self
    }

    fn plain(verb: FoiVerb, target: impl Into<String>) -> Self {
        Foi { verb, target: target.into(), op_kind: None, op_params: BTreeMap::new() }
    }

    /// Output file name of an `op`, if any.
    pub fn output(&self) -> Option<&str> {
        self.op_params.get("output").map(String::as_str)
    }
}

/// Ordered FOIs; serializes as a bare JSON array.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FoiSequence(pub Vec<Foi>);

impl FoiSequence {
    pub fn verbs(&self) -> Vec<FoiVerb> {
        self.0.iter().map(|f| f.verb).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Foi> {
        self.0.iter()
    }
}

impl From<Vec<Foi>> for FoiSequence {
    fn from(v: Vec<Foi>) -> Self {
        FoiSequence(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Basic,
    CloudAssisted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Create,
    Delete,
    Rename,
    Download,
    Compress,
    Encrypt,
    Convert,
    TransferSend,
    TransferRecv,
}

impl Action {
    pub const ALL: [Action; 9] = [
        Action::Create,
        Action::Delete,
        Action::Rename,
        Action::Download,
        Action::Compress,
        Action::Encrypt,
        Action::Convert,
        Action::TransferSend,
        Action::TransferRecv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Create => "create",
            Action::Delete => "delete",
            Action::Rename => "rename",
            Action::Download => "download",
            Action::Compress => "compress",
            Action::Encrypt => "encrypt",
            Action::Convert => "convert",
            Action::TransferSend => "transfer_send",
            Action::TransferRecv => "transfer_recv",
        }
    }

    pub fn category(self) -> Category {
        match self {
            Action::Create | Action::Delete | Action::Rename => Category::Basic,
            _ => Category::CloudAssisted,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Action {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Action::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| DomainError::UnknownOperation(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceMode {
    #[default]
    Private,
    Shared,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationRequest {
    pub category: Category,
    pub action: Action,
    pub args: BTreeMap<String, String>,
    pub instance_mode: InstanceMode,
}

impl OperationRequest {
    /// Builds a request from an action name, deriving its category.
    pub fn new<I, K, V>(action: &str, args: I, instance_mode: InstanceMode) -> Result<Self, DomainError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let action: Action = action.parse()?;
        Ok(OperationRequest {
            category: action.category(),
            action,
            args: args.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
            instance_mode,
        })
    }

    pub fn arg(&self, name: &'static str) -> Result<&str, DomainError> {
        self.args
            .get(name)
            .map(String::as_str)
            .ok_or(DomainError::MissingArgument { action: self.action, arg: name })
    }
}

/// Storage credentials of one account.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialSet {
    pub account_id: String,
    pub token: String,
}

impl fmt::Debug for CredentialSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CredentialSet")
            .field("account_id", &self.account_id)
            .field("token", &"<redacted>")
            .finish()
    }
}

pub fn classify_operation(req: &OperationRequest) -> Category {
    req.action.category()
}

/// Classifies a raw action name, rejecting unknown ones.
pub fn classify_action(name: &str) -> Result<Category, DomainError> {
    name.parse::<Action>().map(Action::category)
}

/// Name of the intermediate file an op produces from `input`.
pub fn intermediate_path(input: &str, kind: OpKind) -> String {
    format!("{input}.{}", kind.suffix())
}

/// Compiles a cloud-assisted operation into the FOIs a worker executes.
///
/// Arguments: `download` takes `url` and `dest`; `compress` and `encrypt`
/// take `path`; `convert` takes `path` and `max_resolution`.
pub fn compile_op_to_fois(req: &OperationRequest) -> Result<FoiSequence, DomainError> {
    let seq = match req.action {
        Action::Create | Action::Delete | Action::Rename => {
            return Err(DomainError::NotCloudAssisted(req.action))
        }
        Action::TransferSend | Action::TransferRecv => return Err(DomainError::TransferNotCompilable),
        Action::Download => {
            let url = req.arg("url")?;
            let dest = req.arg("dest")?;
            validate_path(dest)?;
            vec![Foi::download(url), Foi::put(dest)]
        }
        Action::Compress | Action::Encrypt => {
            let kind = if req.action == Action::Compress { OpKind::Compress } else { OpKind::Encrypt };
            let path = req.arg("path")?;
            validate_path(path)?;
            let out = intermediate_path(path, kind);
            vec![Foi::get(path), Foi::op(kind, path, out.clone()), Foi::put(out)]
        }
        Action::Convert => {
            let path = req.arg("path")?;
            validate_path(path)?;
            let max = req.arg("max_resolution")?;
            let out = intermediate_path(path, OpKind::Convert);
            vec![
                Foi::get(path),
                Foi::op(OpKind::Convert, path, out.clone()).with_param("max_resolution", max),
                Foi::push(out),
            ]
        }
    };
    Ok(FoiSequence(seq))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoiViolation {
    pub step: usize,
    pub reason: String,
}

impl fmt::Display for FoiViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {}: {}", self.step, self.reason)
    }
}

fn is_url(target: &str) -> bool {
    target.contains("://")
}

/// Checks per-verb target constraints and data flow between steps.
/// An empty sequence is valid.
pub fn validate_foi_sequence(seq: &FoiSequence) -> Result<(), Vec<FoiViolation>> {
    let mut violations = Vec::new();
    let mut flag = |step: usize, reason: String| violations.push(FoiViolation { step, reason });
    // Name of the file the previous producing step left in the workspace.
    let mut current: Option<String> = None;

    for (step, foi) in seq.iter().enumerate() {
        if (foi.verb == FoiVerb::Op) != foi.op_kind.is_some() {
            flag(step, "op_kind must be present exactly when verb is op".into());
        }
        match foi.verb {
            FoiVerb::Download => {
                if !is_url(&foi.target) {
                    flag(step, "download requires a URL target".into());
                }
                current = Some(foi.target.clone());
            }
            FoiVerb::Get => {
                if let Err(e) = validate_path(&foi.target) {
                    flag(step, format!("get requires a storage path ({e})"));
                }
                current = Some(foi.target.clone());
            }
            FoiVerb::Put => {
                if is_url(&foi.target) || validate_path(&foi.target).is_err() {
                    flag(step, "put requires a storage path".into());
                }
                if current.is_none() {
                    flag(step, "put has no preceding file to upload".into());
                }
            }
            FoiVerb::Op => {
                match &current {
                    None => flag(step, "op has no preceding get or download".into()),
                    Some(input) if *input != foi.target && !is_url(input) => {
                        flag(step, format!("op consumes `{}` but the preceding step produced `{input}`", foi.target))
                    }
                    Some(_) => {}
                }
                match foi.output() {
                    Some(out) => current = Some(out.to_string()),
                    None => flag(step, "op is missing its output parameter".into()),
                }
                if foi.op_kind == Some(OpKind::Convert) {
                    let ok = foi
                        .op_params
                        .get("max_resolution")
                        .is_some_and(|v| v.parse::<u32>().is_ok_and(|n| n > 0));
                    if !ok {
                        flag(step, "convert requires a positive max_resolution".into());
                    }
                }
            }
            FoiVerb::Push => {
                if foi.target.is_empty() || is_url(&foi.target) {
                    flag(step, "push requires a workspace file name".into());
                }
                if current.is_none() {
                    flag(step, "push has no preceding file to send".into());
                }
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(action: &str, args: &[(&str, &str)]) -> OperationRequest {
        OperationRequest::new(action, args.iter().copied(), InstanceMode::Private).unwrap()
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify_operation(&req("rename", &[("from", "/a"), ("to", "/b")])), Category::Basic);
        assert_eq!(classify_operation(&req("compress", &[("path", "/pics")])), Category::CloudAssisted);
        assert_eq!(classify_action("frobnicate"), Err(DomainError::UnknownOperation("frobnicate".into())));
        assert!(OperationRequest::new("frobnicate", Vec::<(String, String)>::new(), InstanceMode::Shared).is_err());
    }

    #[test]
    fn categories_match_actions() {
        for a in Action::ALL {
            let basic = matches!(a, Action::Create | Action::Delete | Action::Rename);
            assert_eq!(a.category() == Category::Basic, basic, "{a}");
        }
    }

    #[test]
    fn download_compiles_to_download_put() {
        let seq = compile_op_to_fois(&req("download", &[("url", "http://h/f"), ("dest", "/d/f")])).unwrap();
        assert_eq!(seq, FoiSequence(vec![Foi::download("http://h/f"), Foi::put("/d/f")]));
    }

    #[test]
    fn convert_ends_with_push() {
        let seq = compile_op_to_fois(&req("convert", &[("path", "/p.ppm"), ("max_resolution", "128")])).unwrap();
        assert_eq!(seq.verbs(), vec![FoiVerb::Get, FoiVerb::Op, FoiVerb::Push]);
        assert_eq!(seq.0[1].op_kind, Some(OpKind::Convert));
        assert_eq!(seq.0[2].target, "/p.ppm.small");
    }

    #[test]
    fn basic_ops_do_not_compile() {
        let err = compile_op_to_fois(&req("rename", &[("from", "/a"), ("to", "/b")])).unwrap_err();
        assert_eq!(err, DomainError::NotCloudAssisted(Action::Rename));
        let err = compile_op_to_fois(&req("transfer_send", &[])).unwrap_err();
        assert_eq!(err, DomainError::TransferNotCompilable);
    }

    #[test]
    fn missing_argument_is_reported() {
        let err = compile_op_to_fois(&req("compress", &[])).unwrap_err();
        assert_eq!(err, DomainError::MissingArgument { action: Action::Compress, arg: "path" });
    }

    #[test]
    fn validation_examples() {
        let ok = FoiSequence(vec![
            Foi::get("/a"),
            Foi::op(OpKind::Compress, "/a", "/a.gz"),
            Foi::put("/a.gz"),
        ]);
        assert!(validate_foi_sequence(&ok).is_ok());
        assert!(validate_foi_sequence(&FoiSequence::default()).is_ok());

        let bad = FoiSequence(vec![Foi::put("http://evil/x")]);
        let v = validate_foi_sequence(&bad).unwrap_err();
        assert!(v.iter().any(|x| x.step == 0 && x.reason == "put requires a storage path"), "{v:?}");
    }

    #[test]
    fn op_kind_presence_is_checked() {
        let mut foi = Foi::get("/a");
        foi.op_kind = Some(OpKind::Encrypt);
        let v = validate_foi_sequence(&FoiSequence(vec![foi])).unwrap_err();
        assert_eq!(v[0].step, 0);
    }

    #[test]
    fn op_must_consume_preceding_output() {
        let seq = FoiSequence(vec![Foi::get("/a"), Foi::op(OpKind::Compress, "/b", "/b.gz")]);
        assert!(validate_foi_sequence(&seq).is_err());
        let seq = FoiSequence(vec![Foi::op(OpKind::Compress, "/b", "/b.gz")]);
        assert!(validate_foi_sequence(&seq).is_err());
    }

    #[test]
    fn path_rules() {
        assert!(validate_path("/").is_ok());
        assert!(validate_path("/a/b.txt").is_ok());
        for bad in ["a", "/a//b", "/a/../b", "/./a", "/a/", "/a\\b"] {
            assert!(validate_path(bad).is_err(), "{bad}");
        }
        let long = format!("/{}", "x".repeat(MAX_PATH_BYTES));
        assert!(validate_path(&long).is_err());
        assert_eq!(parent("/a/b"), "/a");
        assert_eq!(parent("/a"), "/");
        assert_eq!(basename("/a/b.txt"), "b.txt");
    }

    #[test]
    fn foi_sequence_wire_form() {
        let seq = FoiSequence(vec![Foi::get("/a"), Foi::op(OpKind::Compress, "/a", "/a.gz")]);
        let json = serde_json::to_value(&seq).unwrap();
        assert_eq!(
            json,
            serde_json::json!([
                {"verb": "get", "target": "/a"},
                {"verb": "op", "target": "/a", "op_kind": "compress", "op_params": {"output": "/a.gz"}}
            ])
        );
    }
}

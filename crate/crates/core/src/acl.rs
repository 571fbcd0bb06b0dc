//! Users, hierarchical user groups and the access control list.
//!
//! Levels rank groups (higher is more managerial) but carry no implicit
//! permissions: a group can do exactly what its ACL entries grant.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ErrorKind;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub String);

impl UserId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl GroupId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The closed permission vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Permission {
    Chat,
    FlagAnswer,
    RewriteTicket,
    AttachDocument,
    ApproveTicket,
    ReadTicketAnalytics,
    ManageCorpus,
    ManageUsers,
    ReadAudit,
}

impl Permission {
    pub const ALL: [Permission; 9] = [
        Permission::Chat,
        Permission::FlagAnswer,
        Permission::RewriteTicket,
        Permission::AttachDocument,
        Permission::ApproveTicket,
        Permission::ReadTicketAnalytics,
        Permission::ManageCorpus,
        Permission::ManageUsers,
        Permission::ReadAudit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Permission::Chat => "chat",
            Permission::FlagAnswer => "flag_answer",
            Permission::RewriteTicket => "rewrite_ticket",
            Permission::AttachDocument => "attach_document",
            Permission::ApproveTicket => "approve_ticket",
            Permission::ReadTicketAnalytics => "read_ticket_analytics",
            Permission::ManageCorpus => "manage_corpus",
            Permission::ManageUsers => "manage_users",
            Permission::ReadAudit => "read_audit",
        }
    }
}

impl fmt::Display for Permission {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Permission {
    type Err = AclError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Permission::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| AclError::UnknownPermission(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub user_id: UserId,
    pub display_name: String,
    pub group_ids: BTreeSet<GroupId>,
    pub active: bool,
    /// Hex SHA-256 of the login credential. Users without one cannot log in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserGroup {
    pub group_id: GroupId,
    pub name: String,
    pub level: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AclEntry {
    pub group_id: GroupId,
    pub permission: Permission,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    InactivePrincipal,
    NotGranted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "reason", rename_all = "snake_case")]
pub enum Decision {
    Allow,
    Deny(DenyReason),
}

impl Decision {
    pub fn is_allowed(self) -> bool {
        matches!(self, Decision::Allow)
    }
}

/// What the registry said about an actor at the moment it acted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthSnapshot {
    pub user_id: UserId,
    pub group_ids: BTreeSet<GroupId>,
    pub permission: Permission,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AclError {
    #[error("unknown principal '{0}'")]
    UnknownPrincipal(UserId),
    #[error("unknown group '{0}'")]
    UnknownGroup(GroupId),
    #[error("unknown permission '{0}'")]
    UnknownPermission(String),
    #[error("user '{user}' is not authorized for {permission}")]
    Unauthorized { user: UserId, permission: Permission },
    #[error("user '{0}' already exists")]
    DuplicateUser(UserId),
    #[error("invalid registry: {0}")]
    InvalidRegistry(String),
}

impl AclError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            AclError::UnknownPrincipal(_) => ErrorKind::Unauthenticated,
            AclError::UnknownGroup(_) => ErrorKind::NotFound,
            AclError::UnknownPermission(_) => ErrorKind::Validation,
            AclError::Unauthorized { .. } => ErrorKind::Forbidden,
            AclError::DuplicateUser(_) => ErrorKind::IllegalState,
            AclError::InvalidRegistry(_) => ErrorKind::Validation,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Registry {
    groups: BTreeMap<GroupId, UserGroup>,
    users: BTreeMap<UserId, User>,
    acl: BTreeSet<AclEntry>,
}

impl Registry {
    /// Builds a registry, enforcing every structural invariant.
    pub fn new(
        groups: impl IntoIterator<Item = UserGroup>,
        users: impl IntoIterator<Item = User>,
        acl: impl IntoIterator<Item = AclEntry>,
    ) -> Result<Self, AclError> {
        let mut reg = Registry::default();
        for g in groups {
            if reg.groups.insert(g.group_id.clone(), g.clone()).is_some() {
                return Err(AclError::InvalidRegistry(format!("duplicate group '{}'", g.group_id)));
            }
        }
        if reg.groups.is_empty() {
            return Err(AclError::InvalidRegistry("no groups defined".into()));
        }
        for entry in acl {
            if !reg.groups.contains_key(&entry.group_id) {
                return Err(AclError::UnknownGroup(entry.group_id));
            }
            if !reg.acl.insert(entry.clone()) {
                return Err(AclError::InvalidRegistry(format!(
                    "duplicate acl entry ({}, {})",
                    entry.group_id, entry.permission
                )));
            }
        }
        for u in users {
            reg.check_user(&u)?;
            if reg.users.contains_key(&u.user_id) {
                return Err(AclError::DuplicateUser(u.user_id));
            }
            reg.users.insert(u.user_id.clone(), u);
        }
        Ok(reg)
    }

    fn check_user(&self, user: &User) -> Result<(), AclError> {
        if user.active && user.group_ids.is_empty() {
            return Err(AclError::InvalidRegistry(format!(
                "active user '{}' has no groups",
                user.user_id
            )));
        }
        for g in &user.group_ids {
            if !self.groups.contains_key(g) {
                return Err(AclError::UnknownGroup(g.clone()));
            }
        }
        Ok(())
    }

    /// Three groups: managerial (level 2, every permission), supervisor
    /// (level 1) and operator (level 0), plus an `admin` user in the
    /// managerial group.
    pub fn default_seed() -> Self {
        let groups = [
            ("managerial", "Managers", 2),
            ("supervisor", "Supervisors", 1),
            ("operator", "Operators", 0),
        ]
        .map(|(id, name, level)| UserGroup {
            group_id: GroupId::new(id),
            name: name.into(),
            level,
        });
        let mut acl: Vec<AclEntry> = Permission::ALL
            .into_iter()
            .map(|p| AclEntry {
                group_id: GroupId::new("managerial"),
                permission: p,
            })
            .collect();
        for p in SUPERVISOR_GRANTS {
            acl.push(AclEntry {
                group_id: GroupId::new("supervisor"),
                permission: p,
            });
        }
        for p in OPERATOR_GRANTS {
            acl.push(AclEntry {
                group_id: GroupId::new("operator"),
                permission: p,
            });
        }
        let admin = User {
            user_id: UserId::new("admin"),
            display_name: "Administrator".into(),
            group_ids: [GroupId::new("managerial")].into_iter().collect(),
            active: true,
            credential_sha256: None,
        };
        Registry::new(groups, [admin], acl).expect("seed registry is valid")
    }

    pub fn user(&self, id: &UserId) -> Option<&User> {
        self.users.get(id)
    }

    pub fn group(&self, id: &GroupId) -> Option<&UserGroup> {
        self.groups.get(id)
    }

    pub fn users(&self) -> impl Iterator<Item = &User> {
        self.users.values()
    }

    pub fn groups(&self) -> impl Iterator<Item = &UserGroup> {
        self.groups.values()
    }

    pub fn acl(&self) -> impl Iterator<Item = &AclEntry> {
        self.acl.iter()
    }

    /// The "k" level: highest level among configured groups.
    pub fn max_level(&self) -> u32 {
        self.groups.values().map(|g| g.level).max().unwrap_or(0)
    }

    pub fn group_grants(&self, group: &GroupId, permission: Permission) -> bool {
        self.acl.contains(&AclEntry {
            group_id: group.clone(),
            permission,
        })
    }

    pub fn authorize(&self, user_id: &UserId, permission: Permission) -> Result<Decision, AclError> {
        let user = self
            .users
            .get(user_id)
            .ok_or_else(|| AclError::UnknownPrincipal(user_id.clone()))?;
        if !user.active {
            return Ok(Decision::Deny(DenyReason::InactivePrincipal));
        }
        if user.group_ids.iter().any(|g| self.group_grants(g, permission)) {
            Ok(Decision::Allow)
        } else {
            Ok(Decision::Deny(DenyReason::NotGranted))
        }
    }

    pub fn snapshot(&self, user_id: &UserId, permission: Permission) -> Result<AuthSnapshot, AclError> {
        let decision = self.authorize(user_id, permission)?;
        Ok(AuthSnapshot {
            user_id: user_id.clone(),
            group_ids: self.users[user_id].group_ids.clone(),
            permission,
            decision,
        })
    }

    /// Fails with `Unauthorized` unless `user_id` holds `permission`.
    pub fn require(&self, user_id: &UserId, permission: Permission) -> Result<AuthSnapshot, AclError> {
        let snap = self.snapshot(user_id, permission)?;
        if snap.decision.is_allowed() {
            Ok(snap)
        } else {
            Err(AclError::Unauthorized {
                user: user_id.clone(),
                permission,
            })
        }
    }

    pub fn permissions_of(&self, user_id: &UserId) -> Result<Vec<Permission>, AclError> {
        let mut out = Vec::new();
        for p in Permission::ALL {
            if self.authorize(user_id, p)?.is_allowed() {
                out.push(p);
            }
        }
        Ok(out)
    }

    /// Adds `group_id` to the user's groups. Returns the user and whether
    /// anything changed; assigning a group the user already has is a no-op.
    pub fn assign_group(
        &mut self,
        caller: &UserId,
        user_id: &UserId,
        group_id: &GroupId,
    ) -> Result<(User, bool), AclError> {
        self.require(caller, Permission::ManageUsers)?;
        if !self.groups.contains_key(group_id) {
            return Err(AclError::UnknownGroup(group_id.clone()));
        }
        let user = self
            .users
            .get_mut(user_id)
            .ok_or_else(|| AclError::UnknownPrincipal(user_id.clone()))?;
        let changed = user.group_ids.insert(group_id.clone());
        Ok((user.clone(), changed))
    }

    pub fn add_user(&mut self, caller: &UserId, user: User) -> Result<User, AclError> {
        self.require(caller, Permission::ManageUsers)?;
        if self.users.contains_key(&user.user_id) {
            return Err(AclError::DuplicateUser(user.user_id));
        }
        self.check_user(&user)?;
        self.users.insert(user.user_id.clone(), user.clone());
        Ok(user)
    }

    /// Adds an ACL entry directly (configuration path, no caller check).
    pub fn grant(&mut self, group_id: &GroupId, permission: Permission) -> Result<bool, AclError> {
        if !self.groups.contains_key(group_id) {
            return Err(AclError::UnknownGroup(group_id.clone()));
        }
        Ok(self.acl.insert(AclEntry {
            group_id: group_id.clone(),
            permission,
        }))
    }

    pub fn set_active(&mut self, caller: &UserId, user_id: &UserId, active: bool) -> Result<User, AclError> {
        self.require(caller, Permission::ManageUsers)?;
        let user = self
            .users
            .get_mut(user_id)
            .ok_or_else(|| AclError::UnknownPrincipal(user_id.clone()))?;
        if active && user.group_ids.is_empty() {
            return Err(AclError::InvalidRegistry(
                "cannot activate a user without groups".into(),
            ));
        }
        user.active = active;
        Ok(user.clone())
    }

    /// Checks a login credential. Unknown user, inactive user, missing and
    /// wrong credentials are indistinguishable to the caller.
    pub fn verify_credential(&self, user_id: &UserId, credential: &str) -> bool {
        let Some(user) = self.users.get(user_id) else {
            return false;
        };
        let Some(expected) = &user.credential_sha256 else {
            return false;
        };
        let actual = credential_digest(credential);
        user.active && constant_time_eq(actual.as_bytes(), expected.to_ascii_lowercase().as_bytes())
    }

    pub fn from_toml(text: &str) -> Result<Self, AclError> {
        let file: RegistryFile = toml::from_str(text).map_err(|e| AclError::InvalidRegistry(e.to_string()))?;
        file.into_registry()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(&RegistryFile::from_registry(self)).expect("registry serializes")
    }

    pub fn to_file_model(&self) -> RegistryFile {
        RegistryFile::from_registry(self)
    }
}

/// The principal behind an operation, plus the gateway request id when the
/// operation arrived over HTTP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caller {
    pub user_id: UserId,
    pub request_id: Option<String>,
}

impl Caller {
    pub fn user(id: impl Into<String>) -> Self {
        Self {
            user_id: UserId::new(id),
            request_id: None,
        }
    }

    pub fn with_request(mut self, request_id: impl Into<String>) -> Self {
        self.request_id = Some(request_id.into());
        self
    }
}

pub const SUPERVISOR_GRANTS: [Permission; 5] = [
    Permission::Chat,
    Permission::FlagAnswer,
    Permission::RewriteTicket,
    Permission::AttachDocument,
    Permission::ApproveTicket,
];

pub const OPERATOR_GRANTS: [Permission; 2] = [Permission::Chat, Permission::FlagAnswer];

pub fn credential_digest(credential: &str) -> String {
    hex::encode(Sha256::digest(credential.as_bytes()))
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// On-disk registry schema (TOML).
///
/// ```toml
/// [[group]]
/// id = "supervisor"
/// name = "Supervisors"
/// level = 1
/// permissions = ["chat", "flag_answer", "rewrite_ticket"]
///
/// [[user]]
/// id = "sam"
/// display_name = "Sam"
/// groups = ["supervisor"]
/// active = true
/// credential_sha256 = "..."
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryFile {
    #[serde(default)]
    pub group: Vec<GroupDef>,
    #[serde(default)]
    pub user: Vec<UserDef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupDef {
    pub id: String,
    pub name: String,
    pub level: u32,
    #[serde(default)]
    pub permissions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserDef {
    pub id: String,
    pub display_name: String,
    pub groups: Vec<String>,
    #[serde(default = "default_true")]
    pub active: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential_sha256: Option<String>,
}

fn default_true() -> bool {
    true
}

impl RegistryFile {
    pub fn into_registry(self) -> Result<Registry, AclError> {
        let mut acl = Vec::new();
        let mut groups = Vec::new();
        for g in self.group {
            for p in &g.permissions {
                acl.push(AclEntry {
                    group_id: GroupId::new(&g.id),
                    permission: p.parse()?,
                });
            }
            groups.push(UserGroup {
                group_id: GroupId::new(g.id),
                name: g.name,
                level: g.level,
            });
        }
        let users = self.user.into_iter().map(|u| User {
            user_id: UserId::new(u.id),
            display_name: u.display_name,
            group_ids: u.groups.into_iter().map(GroupId::new).collect(),
            active: u.active,
            credential_sha256: u.credential_sha256,
        });
        Registry::new(groups, users, acl)
    }

    fn from_registry(reg: &Registry) -> Self {
        let group = reg
            .groups
            .values()
            .map(|g| GroupDef {
                id: g.group_id.0.clone(),
                name: g.name.clone(),
                level: g.level,
                permissions: reg
                    .acl
                    .iter()
                    .filter(|e| e.group_id == g.group_id)
                    .map(|e| e.permission.as_str().to_string())
                    .collect(),
            })
            .collect();
        let user = reg
            .users
            .values()
            .map(|u| UserDef {
                id: u.user_id.0.clone(),
                display_name: u.display_name.clone(),
                groups: u.group_ids.iter().map(|g| g.0.clone()).collect(),
                active: u.active,
                credential_sha256: u.credential_sha256.clone(),
            })
            .collect();
        RegistryFile { group, user }
    }
}

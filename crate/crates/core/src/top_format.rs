//! TOP-style bracketed semantic parse trees.
//!
//! A tree is written as whitespace-separated tokens where `[in:label` and
//! `[sl:label` open intent and slot nodes, `]` closes the innermost open node
//! and every other token is a leaf copied from the utterance:
//!
//! ```text
//! [in:get_weather [sl:location sierra mountains ] [sl:date_time this afternoon ] ]
//! ```
//!
//! Equality of trees is equality of their canonical serializations; no
//! semantic normalization (such as sibling reordering) is applied.

use std::fmt;

use thiserror::Error;

pub const INTENT_PREFIX: &str = "in:";
pub const SLOT_PREFIX: &str = "sl:";
pub const CLOSE: &str = "]";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("empty input")]
    EmptyInput,
    #[error("unbalanced brackets at token {position}")]
    UnbalancedBrackets { position: usize },
    #[error("token {token:?} at position {position} does not start with `in:` or `sl:`")]
    UnknownLabelPrefix { token: String, position: usize },
    #[error("more than one top-level item (second starts at token {position})")]
    MultipleRoots { position: usize },
    #[error("root node must be an intent, found slot {label:?}")]
    RootNotIntent { label: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    Intent,
    Slot,
}

impl NodeKind {
    pub fn prefix(self) -> &'static str {
        match self {
            NodeKind::Intent => INTENT_PREFIX,
            NodeKind::Slot => SLOT_PREFIX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Child {
    Node(ParseNode),
    Token(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseNode {
    pub kind: NodeKind,
    /// Label without its `in:`/`sl:` prefix, always lowercase.
    pub label: String,
    pub children: Vec<Child>,
}

impl ParseNode {
    pub fn new(kind: NodeKind, label: &str) -> Self {
        ParseNode {
            kind,
            label: label.to_lowercase(),
            children: Vec::new(),
        }
    }

    pub fn intent(label: &str) -> Self {
        Self::new(NodeKind::Intent, label)
    }

    pub fn slot(label: &str) -> Self {
        Self::new(NodeKind::Slot, label)
    }

    pub fn with_token(mut self, token: &str) -> Self {
        self.children.push(Child::Token(token.to_string()));
        self
    }

    pub fn with_tokens(mut self, tokens: &str) -> Self {
        for t in tokens.split_whitespace() {
            self.children.push(Child::Token(t.to_string()));
        }
        self
    }

    pub fn with_child(mut self, node: ParseNode) -> Self {
        self.children.push(Child::Node(node));
        self
    }

    /// Bracket symbol opening this node, e.g. `[in:get_weather`.
    pub fn open_symbol(&self) -> String {
        format!("[{}{}", self.kind.prefix(), self.label)
    }

    fn write_tokens<'a>(&'a self, out: &mut Vec<std::borrow::Cow<'a, str>>) {
        out.push(self.open_symbol().into());
        for child in &self.children {
            match child {
                Child::Node(n) => n.write_tokens(out),
                Child::Token(t) => out.push(t.as_str().into()),
            }
        }
        out.push(CLOSE.into());
    }

    /// Pre-order visit of every node.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a ParseNode)) {
        f(self);
        for child in &self.children {
            if let Child::Node(n) = child {
                n.visit(f);
            }
        }
    }

    /// Pre-order mutable visit of every node.
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut ParseNode)) {
        f(self);
        for child in &mut self.children {
            if let Child::Node(n) = child {
                n.visit_mut(f);
            }
        }
    }

    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a str>) {
        for child in &self.children {
            match child {
                Child::Node(n) => n.collect_leaves(out),
                Child::Token(t) => out.push(t),
            }
        }
    }

    pub fn node_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }

    /// Tree shape with labels erased: kinds, arity and token placement.
    pub fn shape_signature(&self) -> String {
        let mut s = String::new();
        self.write_shape(&mut s);
        s
    }

    fn write_shape(&self, s: &mut String) {
        s.push(match self.kind {
            NodeKind::Intent => 'I',
            NodeKind::Slot => 'S',
        });
        s.push('(');
        for child in &self.children {
            match child {
                Child::Node(n) => n.write_shape(s),
                Child::Token(t) => {
                    s.push_str(t);
                    s.push(' ');
                }
            }
        }
        s.push(')');
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseTree {
    pub root: ParseNode,
    pub source_tokens: Vec<String>,
}

impl ParseTree {
    /// Builds a tree whose source tokens are its own leaves.
    pub fn new(root: ParseNode) -> Self {
        let source_tokens = root.leaves().into_iter().map(str::to_string).collect();
        ParseTree {
            root,
            source_tokens,
        }
    }

    pub fn with_source(root: ParseNode, source_tokens: Vec<String>) -> Self {
        ParseTree {
            root,
            source_tokens,
        }
    }

    pub fn tokens(&self) -> Vec<std::borrow::Cow<'_, str>> {
        let mut out = Vec::new();
        self.root.write_tokens(&mut out);
        out
    }

    /// Leaf tokens that cannot be matched, in order, against `source_tokens`.
    ///
    /// Gold trees normally copy their leaves in source order; predictions may
    /// not. Returns the leaf indices that break the in-order alignment.
    pub fn source_order_violations(&self) -> Vec<usize> {
        let mut violations = Vec::new();
        let mut cursor = 0;
        for (i, leaf) in self.root.leaves().into_iter().enumerate() {
            match self.source_tokens[cursor..].iter().position(|t| t == leaf) {
                Some(offset) => cursor += offset + 1,
                None => violations.push(i),
            }
        }
        violations
    }
}

impl fmt::Display for ParseTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_tree(self))
    }
}

/// Parses a bracketed string into a tree.
pub fn parse_tree(text: &str) -> Result<ParseTree, ParseError> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.is_empty() {
        return Err(ParseError::EmptyInput);
    }
    let mut stack: Vec<ParseNode> = Vec::new();
    let mut root: Option<ParseNode> = None;
    for (position, &tok) in tokens.iter().enumerate() {
        if let Some(rest) = tok.strip_prefix('[') {
            if root.is_some() {
                return Err(ParseError::MultipleRoots { position });
            }
            let node = parse_open(rest).ok_or_else(|| ParseError::UnknownLabelPrefix {
                token: tok.to_string(),
                position,
            })?;
            stack.push(node);
        } else if tok == CLOSE {
            let node = stack
                .pop()
                .ok_or(ParseError::UnbalancedBrackets { position })?;
            match stack.last_mut() {
                Some(parent) => parent.children.push(Child::Node(node)),
                None => root = Some(node),
            }
        } else {
            match stack.last_mut() {
                Some(parent) => parent.children.push(Child::Token(tok.to_string())),
                None => return Err(ParseError::MultipleRoots { position }),
            }
        }
    }
    if !stack.is_empty() {
        return Err(ParseError::UnbalancedBrackets {
            position: tokens.len(),
        });
    }
    let root = root.expect("non-empty input with empty stack has a root");
    if root.kind != NodeKind::Intent {
        return Err(ParseError::RootNotIntent { label: root.label });
    }
    Ok(ParseTree::new(root))
}

fn parse_open(rest: &str) -> Option<ParseNode> {
    let lower = rest.to_lowercase();
    let (kind, label) = if let Some(l) = lower.strip_prefix(INTENT_PREFIX) {
        (NodeKind::Intent, l)
    } else if let Some(l) = lower.strip_prefix(SLOT_PREFIX) {
        (NodeKind::Slot, l)
    } else {
        return None;
    };
    if label.is_empty() {
        return None;
    }
    Some(ParseNode {
        kind,
        label: label.to_string(),
        children: Vec::new(),
    })
}

/// Canonical form: single spaces between tokens, lowercase labels.
pub fn serialize_tree(tree: &ParseTree) -> String {
    serialize_node(&tree.root)
}

pub fn serialize_node(node: &ParseNode) -> String {
    let mut out = Vec::new();
    node.write_tokens(&mut out);
    out.join(" ")
}

pub fn trees_equal(a: &ParseTree, b: &ParseTree) -> bool {
    serialize_tree(a) == serialize_tree(b)
}

/// Intent and slot label occurrences in pre-order, with multiplicity.
pub fn collect_labels(tree: &ParseTree) -> (Vec<String>, Vec<String>) {
    let mut intents = Vec::new();
    let mut slots = Vec::new();
    tree.root.visit(&mut |n| match n.kind {
        NodeKind::Intent => intents.push(n.label.clone()),
        NodeKind::Slot => slots.push(n.label.clone()),
    });
    (intents, slots)
}

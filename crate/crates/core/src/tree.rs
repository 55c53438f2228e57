//! Broadcast trees: one binary tree per channel whose leaves are either
//! assigned to a client or available. The alternating walk from the root
//! picks one leaf per slot, so a leaf at depth `d` transmits once every
//! `2^d` slots.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::mem;

use thiserror::Error;

use crate::model::{depth_of, ChannelId, Client, ClientId, Placement, Time};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("client {0} is not placed in any tree")]
    UnknownClient(ClientId),
    #[error("client {0} is already placed")]
    AlreadyPlaced(ClientId),
    #[error("cannot graft {0} onto itself")]
    SameTree(ChannelId),
    #[error("{channel} has no available leaf at depth {depth}")]
    NoAvailableLeaf { channel: ChannelId, depth: u32 },
    #[error("unknown channel {0}")]
    UnknownChannel(ChannelId),
    #[error("malformed tree dump at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Internal(Box<Node>, Box<Node>),
    Assigned(ClientId),
    Available,
}

impl Node {
    fn pair(left: Node, right: Node) -> Node {
        Node::Internal(Box::new(left), Box::new(right))
    }

    fn is_available(&self) -> bool {
        matches!(self, Node::Available)
    }

    fn at(&self, path: &[bool]) -> &Node {
        let mut node = self;
        for &right in path {
            node = match node {
                Node::Internal(l, r) => {
                    if right {
                        r
                    } else {
                        l
                    }
                }
                _ => panic!("path runs past a leaf"),
            };
        }
        node
    }

    fn at_mut(&mut self, path: &[bool]) -> &mut Node {
        let mut node = self;
        for &right in path {
            node = match node {
                Node::Internal(l, r) => {
                    if right {
                        &mut **r
                    } else {
                        &mut **l
                    }
                }
                _ => panic!("path runs past a leaf"),
            };
        }
        node
    }

    /// Visits every leaf with its root-to-leaf turn sequence (false = left).
    fn for_each_leaf<F: FnMut(&[bool], &Node)>(&self, path: &mut Vec<bool>, f: &mut F) {
        match self {
            Node::Internal(l, r) => {
                path.push(false);
                l.for_each_leaf(path, f);
                path.pop();
                path.push(true);
                r.for_each_leaf(path, f);
                path.pop();
            }
            leaf => f(path, leaf),
        }
    }

    fn client_count(&self) -> usize {
        match self {
            Node::Internal(l, r) => l.client_count() + r.client_count(),
            Node::Assigned(_) => 1,
            Node::Available => 0,
        }
    }

    fn render(&self, out: &mut String) {
        match self {
            Node::Internal(l, r) => {
                out.push('(');
                l.render(out);
                out.push(',');
                r.render(out);
                out.push(')');
            }
            Node::Assigned(c) => {
                let _ = write!(out, "c{}", c.0);
            }
            Node::Available => out.push('_'),
        }
    }
}

/// Offset of the slots visited by the leaf reached through `path`:
/// `sum of b_k * 2^(k-1)`.
pub fn path_offset(path: &[bool]) -> u64 {
    path.iter().enumerate().map(|(k, &right)| (right as u64) << k).sum()
}

// Chain of `height` internal nodes hanging to the left; every right child is
// available and the bottom-left leaf holds the client.
fn caterpillar(height: u32, client: ClientId) -> Node {
    (0..height).fold(Node::Assigned(client), |node, _| Node::pair(node, Node::Available))
}

// Bottom-up collapse of available sibling pairs anywhere below `node`.
fn normalize(node: Node) -> Node {
    match node {
        Node::Internal(l, r) => {
            let (l, r) = (normalize(*l), normalize(*r));
            if l.is_available() && r.is_available() {
                Node::Available
            } else {
                Node::pair(l, r)
            }
        }
        leaf => leaf,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafInfo {
    pub path: Vec<bool>,
    pub client: Option<ClientId>,
}

impl LeafInfo {
    pub fn depth(&self) -> u32 {
        self.path.len() as u32
    }
}

#[derive(Debug, Clone)]
pub struct BroadcastTree {
    channel: ChannelId,
    root: Node,
    created: u64,
    available: BTreeMap<u32, usize>,
    clients: usize,
}

impl BroadcastTree {
    pub fn new(channel: ChannelId, root: Node, created: u64) -> Self {
        let mut tree = BroadcastTree { channel, root, created, available: BTreeMap::new(), clients: 0 };
        tree.refresh();
        tree
    }

    fn refresh(&mut self) {
        let mut available = BTreeMap::new();
        let mut clients = 0;
        self.root.for_each_leaf(&mut Vec::new(), &mut |path, leaf| match leaf {
            Node::Available => *available.entry(path.len() as u32).or_insert(0) += 1,
            _ => clients += 1,
        });
        self.available = available;
        self.clients = clients;
    }

    pub fn channel(&self) -> ChannelId {
        self.channel
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn created(&self) -> u64 {
        self.created
    }

    pub fn client_count(&self) -> usize {
        self.clients
    }

    /// Number of available leaves per depth.
    pub fn available_depths(&self) -> &BTreeMap<u32, usize> {
        &self.available
    }

    pub fn has_available(&self, depth: u32) -> bool {
        self.available.contains_key(&depth)
    }

    pub fn leaves(&self) -> Vec<LeafInfo> {
        let mut out = Vec::new();
        self.root.for_each_leaf(&mut Vec::new(), &mut |path, leaf| {
            out.push(LeafInfo {
                path: path.to_vec(),
                client: match leaf {
                    Node::Assigned(c) => Some(*c),
                    _ => None,
                },
            })
        });
        out
    }

    /// Leaf chosen at slot `t`. Each bifurcation alternates between its
    /// children over successive visits, starting left; the bits of `t` read
    /// from the least significant end are exactly those turns.
    pub fn slot_leaf(&self, t: Time) -> (&Node, u32) {
        let mut node = &self.root;
        let mut t = t;
        let mut depth = 0;
        while let Node::Internal(l, r) = node {
            node = if t & 1 == 0 { l } else { r };
            t >>= 1;
            depth += 1;
        }
        (node, depth)
    }

    pub fn find_client(&self, id: ClientId) -> Option<Vec<bool>> {
        let mut found = None;
        self.root.for_each_leaf(&mut Vec::new(), &mut |path, leaf| {
            if found.is_none() && *leaf == Node::Assigned(id) {
                found = Some(path.to_vec());
            }
        });
        found
    }

    /// Leftmost available leaf at `depth`.
    pub fn find_available(&self, depth: u32) -> Option<Vec<bool>> {
        if !self.has_available(depth) {
            return None;
        }
        let mut found = None;
        self.root.for_each_leaf(&mut Vec::new(), &mut |path, leaf| {
            if found.is_none() && leaf.is_available() && path.len() as u32 == depth {
                found = Some(path.to_vec());
            }
        });
        found
    }

    /// Clients inside the sibling branch of the leftmost available leaf at
    /// `depth`; this is what a graft with this tree as donor would move.
    pub fn sibling_branch_clients(&self, depth: u32) -> Option<usize> {
        let mut path = self.find_available(depth)?;
        if path.is_empty() {
            return Some(0);
        }
        let last = path.len() - 1;
        path[last] = !path[last];
        Some(self.root.at(&path).client_count())
    }

    // Collapses available sibling pairs upward starting from the node at
    // `path`, which must itself be available.
    fn collapse_from(&mut self, path: &[bool]) {
        let mut path = path.to_vec();
        while path.pop().is_some() {
            let parent = self.root.at_mut(&path);
            let both_free = matches!(parent, Node::Internal(l, r) if l.is_available() && r.is_available());
            if !both_free {
                break;
            }
            *parent = Node::Available;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.root.is_available()
    }

    /// Parenthesised dump, e.g. `ch3:((c17,_),(c4,(c9,_)))`.
    pub fn render(&self) -> String {
        let mut out = format!("{}:", self.channel);
        self.root.render(&mut out);
        out
    }

    /// Parses the output of [`BroadcastTree::render`].
    pub fn parse(line: &str) -> Result<BroadcastTree, TreeError> {
        let err = |pos: usize, msg: &str| TreeError::Parse { pos, msg: msg.to_string() };
        let line = line.trim();
        let (head, body) = line.split_once(':').ok_or_else(|| err(0, "missing ':'"))?;
        let channel =
            head.strip_prefix("ch").and_then(|s| s.parse::<u32>().ok()).ok_or_else(|| err(0, "bad channel label"))?;
        let bytes = body.as_bytes();
        let mut pos = 0;
        let root = parse_node(bytes, &mut pos).map_err(|(p, m)| err(head.len() + 1 + p, &m))?;
        if pos != bytes.len() {
            return Err(err(head.len() + 1 + pos, "trailing input"));
        }
        Ok(BroadcastTree::new(ChannelId(channel), root, 0))
    }
}

fn parse_node(bytes: &[u8], pos: &mut usize) -> Result<Node, (usize, String)> {
    match bytes.get(*pos) {
        Some(b'_') => {
            *pos += 1;
            Ok(Node::Available)
        }
        Some(b'c') => {
            *pos += 1;
            let start = *pos;
            while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
                *pos += 1;
            }
            let id = std::str::from_utf8(&bytes[start..*pos])
                .ok()
                .and_then(|s| s.parse::<u64>().ok())
                .ok_or((start, "bad client id".to_string()))?;
            Ok(Node::Assigned(ClientId(id)))
        }
        Some(b'(') => {
            *pos += 1;
            let left = parse_node(bytes, pos)?;
            if bytes.get(*pos) != Some(&b',') {
                return Err((*pos, "expected ','".into()));
            }
            *pos += 1;
            let right = parse_node(bytes, pos)?;
            if bytes.get(*pos) != Some(&b')') {
                return Err((*pos, "expected ')'".into()));
            }
            *pos += 1;
            Ok(Node::pair(left, right))
        }
        _ => Err((*pos, "expected '_', 'c<id>' or '('".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InsertOutcome {
    pub placement: Placement,
    pub opened: Option<ChannelId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraftOutcome {
    /// New placements of every client carried by the moved branch.
    pub moved: Vec<Placement>,
    pub released: Option<ChannelId>,
}

/// All broadcast trees of one simulation, keyed by channel.
#[derive(Debug, Clone, Default)]
pub struct Forest {
    trees: BTreeMap<ChannelId, BroadcastTree>,
    location: HashMap<ClientId, ChannelId>,
    laxity: HashMap<ClientId, u64>,
    next_channel: u32,
}

impl Forest {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a forest from dump lines. Clients get the laxity of the depth
    /// they sit at.
    pub fn from_dump(text: &str) -> Result<Forest, TreeError> {
        let mut forest = Forest::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let tree = BroadcastTree::parse(line)?;
            for leaf in tree.leaves() {
                if let Some(c) = leaf.client {
                    forest.location.insert(c, tree.channel);
                    forest.laxity.insert(c, 1 << leaf.depth());
                }
            }
            forest.next_channel = forest.next_channel.max(tree.channel.0 + 1);
            forest.trees.insert(tree.channel, tree);
        }
        Ok(forest)
    }

    pub fn channels(&self) -> usize {
        self.trees.len()
    }

    pub fn client_count(&self) -> usize {
        self.location.len()
    }

    pub fn trees(&self) -> impl Iterator<Item = &BroadcastTree> {
        self.trees.values()
    }

    pub fn tree(&self, channel: ChannelId) -> Option<&BroadcastTree> {
        self.trees.get(&channel)
    }

    pub fn channel_of(&self, id: ClientId) -> Option<ChannelId> {
        self.location.get(&id).copied()
    }

    pub fn laxity_of(&self, id: ClientId) -> Option<u64> {
        self.laxity.get(&id).copied()
    }

    pub fn placement_of(&self, id: ClientId) -> Option<Placement> {
        let channel = self.channel_of(id)?;
        let path = self.trees[&channel].find_client(id)?;
        Some(leaf_placement(id, channel, &path))
    }

    pub fn render(&self) -> String {
        self.trees.values().map(|t| t.render() + "\n").collect()
    }

    /// Places an arriving client without touching anyone else: an exact-depth
    /// available leaf if one exists, otherwise a caterpillar appended below
    /// the deepest shallower available leaf, otherwise a fresh channel.
    pub fn insert_greedy(&mut self, client: &Client, round: u64) -> Result<InsertOutcome, TreeError> {
        if self.location.contains_key(&client.id) {
            return Err(TreeError::AlreadyPlaced(client.id));
        }
        let v = depth_of(client.laxity);
        let exact = self.trees.values().find(|t| t.has_available(v)).map(|t| t.channel);
        let (channel, path, opened) = if let Some(ch) = exact {
            let tree = self.trees.get_mut(&ch).expect("tree exists");
            let path = tree.find_available(v).expect("census says available");
            *tree.root.at_mut(&path) = Node::Assigned(client.id);
            tree.refresh();
            (ch, path, None)
        } else {
            let mut best: Option<(u32, ChannelId)> = None;
            for tree in self.trees.values() {
                if let Some((&u, _)) = tree.available.range(..v).next_back() {
                    if best.is_none_or(|(bu, _)| u > bu) {
                        best = Some((u, tree.channel));
                    }
                }
            }
            match best {
                Some((u, ch)) => {
                    let tree = self.trees.get_mut(&ch).expect("tree exists");
                    let mut path = tree.find_available(u).expect("census says available");
                    *tree.root.at_mut(&path) = caterpillar(v - u, client.id);
                    tree.refresh();
                    path.extend(std::iter::repeat_n(false, (v - u) as usize));
                    (ch, path, None)
                }
                None => {
                    let ch = ChannelId(self.next_channel);
                    self.next_channel += 1;
                    let tree = BroadcastTree::new(ch, caterpillar(v, client.id), round);
                    self.trees.insert(ch, tree);
                    (ch, vec![false; v as usize], Some(ch))
                }
            }
        };
        self.location.insert(client.id, channel);
        self.laxity.insert(client.id, client.laxity);
        Ok(InsertOutcome { placement: leaf_placement(client.id, channel, &path), opened })
    }

    /// Frees the client's leaf and collapses available siblings upward. If
    /// the whole tree becomes available its channel is released.
    pub fn remove(&mut self, id: ClientId) -> Result<Option<ChannelId>, TreeError> {
        let channel = self.location.remove(&id).ok_or(TreeError::UnknownClient(id))?;
        self.laxity.remove(&id);
        let tree = self.trees.get_mut(&channel).expect("located tree exists");
        let path = tree.find_client(id).expect("located client is in its tree");
        *tree.root.at_mut(&path) = Node::Available;
        tree.collapse_from(&path);
        if tree.is_empty() {
            self.trees.remove(&channel);
            return Ok(Some(channel));
        }
        tree.refresh();
        Ok(None)
    }

    /// Depth -> trees holding at least one available leaf at that depth.
    pub fn available_depth_census(&self) -> BTreeMap<u32, Vec<ChannelId>> {
        let mut census: BTreeMap<u32, Vec<ChannelId>> = BTreeMap::new();
        for tree in self.trees.values() {
            for &d in tree.available.keys() {
                census.entry(d).or_default().push(tree.channel);
            }
        }
        census
    }

    /// Largest number of distinct trees sharing an available depth.
    pub fn max_trees_per_depth(&self) -> usize {
        self.available_depth_census().values().map(Vec::len).max().unwrap_or(0)
    }

    /// Moves the sibling branch of the donor's available leaf at `depth`
    /// into the recipient's available leaf at the same depth. The donor's
    /// parent node becomes available and collapses as usual.
    pub fn graft_merge(
        &mut self,
        recipient: ChannelId,
        donor: ChannelId,
        depth: u32,
    ) -> Result<GraftOutcome, TreeError> {
        if recipient == donor {
            return Err(TreeError::SameTree(donor));
        }
        let recipient_path = self
            .trees
            .get(&recipient)
            .ok_or(TreeError::UnknownChannel(recipient))?
            .find_available(depth)
            .ok_or(TreeError::NoAvailableLeaf { channel: recipient, depth })?;
        let donor_tree = self.trees.get_mut(&donor).ok_or(TreeError::UnknownChannel(donor))?;
        let donor_path = donor_tree
            .find_available(depth)
            .filter(|p| !p.is_empty())
            .ok_or(TreeError::NoAvailableLeaf { channel: donor, depth })?;

        let parent_path = &donor_path[..donor_path.len() - 1];
        let available_is_right = *donor_path.last().expect("depth >= 1");
        let branch = match mem::replace(donor_tree.root.at_mut(parent_path), Node::Available) {
            Node::Internal(l, r) => {
                if available_is_right {
                    *l
                } else {
                    *r
                }
            }
            _ => unreachable!("parent of a leaf is internal"),
        };
        donor_tree.collapse_from(parent_path);
        let released = if donor_tree.is_empty() {
            self.trees.remove(&donor);
            Some(donor)
        } else {
            donor_tree.refresh();
            None
        };

        let tree = self.trees.get_mut(&recipient).expect("checked above");
        *tree.root.at_mut(&recipient_path) = normalize(branch);
        tree.refresh();

        let mut moved = Vec::new();
        let mut prefix = recipient_path.clone();
        tree.root.at(&recipient_path).for_each_leaf(&mut prefix, &mut |path, leaf| {
            if let Node::Assigned(c) = leaf {
                moved.push(leaf_placement(*c, recipient, path));
            }
        });
        for p in &moved {
            self.location.insert(p.client, recipient);
        }
        Ok(GraftOutcome { moved, released })
    }

    /// Checks the structural invariants; returns a description of the first
    /// problem found.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = 0;
        for tree in self.trees.values() {
            if tree.is_empty() {
                return Err(format!("{} is empty but not released", tree.channel));
            }
            check_no_free_siblings(&tree.root).map_err(|e| format!("{}: {e}", tree.channel))?;
            for leaf in tree.leaves() {
                if let Some(c) = leaf.client {
                    seen += 1;
                    if self.location.get(&c) != Some(&tree.channel) {
                        return Err(format!("client {c} not indexed under {}", tree.channel));
                    }
                    let w = self.laxity[&c];
                    if (1u64 << leaf.depth()) > w {
                        return Err(format!("client {c} at depth {} exceeds laxity {w}", leaf.depth()));
                    }
                }
            }
        }
        if seen != self.location.len() {
            return Err(format!("{} clients indexed, {seen} in trees", self.location.len()));
        }
        Ok(())
    }
}

fn check_no_free_siblings(node: &Node) -> Result<(), String> {
    if let Node::Internal(l, r) = node {
        if l.is_available() && r.is_available() {
            return Err("two available sibling leaves".into());
        }
        check_no_free_siblings(l)?;
        check_no_free_siblings(r)?;
    }
    Ok(())
}

fn leaf_placement(client: ClientId, channel: ChannelId, path: &[bool]) -> Placement {
    Placement { client, channel, period: 1 << path.len(), offset: path_offset(path) }
}

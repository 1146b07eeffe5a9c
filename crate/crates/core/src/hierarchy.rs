//! Label taxonomy: tree construction from label paths, label sentences and
//! bottom-up truncation.
//!
//! Class indices are the order in which label paths are declared. Nodes are
//! merged by exact (case-sensitive) name at each level.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Separator used when a leaf's ancestor names are joined for `{label}`.
pub const PATH_JOIN: &str = ", ";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HierarchyError {
    #[error("no label paths given")]
    EmptyTaxonomy,
    #[error("class {0} has an empty label path")]
    EmptyPath(usize),
    #[error("class {0} declared more than once")]
    DuplicateClass(usize),
    #[error("class indices must be 0..{expected}; class {missing} is missing")]
    MissingClass { expected: usize, missing: usize },
    #[error("label path of class {0} ends on an internal node")]
    PrefixConflict(usize),
    #[error("classes {0} and {1} share the same label path")]
    DuplicatePath(usize, usize),
    #[error("classes {0} and {1} collide after truncation")]
    LeafCollision(usize, usize),
    #[error("unknown class {0}")]
    UnknownClass(usize),
    #[error("depth {depth} out of range 1..={leaf_depth}")]
    DepthOutOfRange { depth: usize, leaf_depth: usize },
    #[error("truncation levels must be positive")]
    InvalidLevels,
    #[error("placeholder `{placeholder}` cannot be resolved for class {class}")]
    UnresolvedPlaceholder { placeholder: String, class: usize },
    #[error("malformed placeholder near byte {0} of template")]
    MalformedTemplate(usize),
    #[error("description file refers to unknown label path `{0}`")]
    UnknownDescriptionPath(String),
    #[error("description file: {0}")]
    DescriptionFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub name: String,
    pub depth: usize,
    pub children: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTree {
    nodes: Vec<LabelNode>,
    root_id: NodeId,
    leaf_ids: Vec<NodeId>,
}

/// A `(class_index, names from depth 1 down to the leaf)` pair.
pub type LabelPath = (usize, Vec<String>);

/// Builds a tree from root-to-leaf name paths.
pub fn build_tree(label_paths: &[LabelPath]) -> Result<LabelTree, HierarchyError> {
    if label_paths.is_empty() {
        return Err(HierarchyError::EmptyTaxonomy);
    }
    let num_classes = label_paths.len();
    let mut seen = vec![false; num_classes];
    for (class, path) in label_paths {
        if *class < num_classes && std::mem::replace(&mut seen[*class], true) {
            return Err(HierarchyError::DuplicateClass(*class));
        }
        if path.is_empty() {
            return Err(HierarchyError::EmptyPath(*class));
        }
    }
    // With one path per class, any out-of-range index leaves a gap below.
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(HierarchyError::MissingClass {
            expected: num_classes,
            missing,
        });
    }

    let mut nodes = vec![LabelNode {
        id: NodeId(0),
        parent: None,
        name: String::from("<root>"),
        depth: 0,
        children: Vec::new(),
    }];
    let mut leaf_of_class = vec![NodeId(0); num_classes];
    let mut class_of_leaf: HashMap<NodeId, usize> = HashMap::new();

    for (class, path) in label_paths {
        let mut cur = NodeId(0);
        for name in path {
            let found = nodes[cur.0]
                .children
                .iter()
                .copied()
                .find(|&ch| nodes[ch.0].name == *name);
            cur = match found {
                Some(ch) => ch,
                None => {
                    let id = NodeId(nodes.len());
                    let depth = nodes[cur.0].depth + 1;
                    nodes.push(LabelNode {
                        id,
                        parent: Some(cur),
                        name: name.clone(),
                        depth,
                        children: Vec::new(),
                    });
                    nodes[cur.0].children.push(id);
                    id
                }
            };
        }
        if let Some(&other) = class_of_leaf.get(&cur) {
            return Err(HierarchyError::DuplicatePath(other, *class));
        }
        class_of_leaf.insert(cur, *class);
        leaf_of_class[*class] = cur;
    }

    for (class, leaf) in leaf_of_class.iter().enumerate() {
        if !nodes[leaf.0].children.is_empty() {
            return Err(HierarchyError::PrefixConflict(class));
        }
    }

    Ok(LabelTree {
        nodes,
        root_id: NodeId(0),
        leaf_ids: leaf_of_class,
    })
}

impl LabelTree {
    pub fn num_classes(&self) -> usize {
        self.leaf_ids.len()
    }

    pub fn root(&self) -> NodeId {
        self.root_id
    }

    pub fn nodes(&self) -> &[LabelNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &LabelNode {
        &self.nodes[id.0]
    }

    pub fn leaf_ids(&self) -> &[NodeId] {
        &self.leaf_ids
    }

    pub fn leaf(&self, class_index: usize) -> Result<NodeId, HierarchyError> {
        self.leaf_ids
            .get(class_index)
            .copied()
            .ok_or(HierarchyError::UnknownClass(class_index))
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id.0].parent
    }

    pub fn leaf_depth(&self, class_index: usize) -> Result<usize, HierarchyError> {
        Ok(self.node(self.leaf(class_index)?).depth)
    }

    pub fn max_depth(&self) -> usize {
        self.leaf_ids.iter().map(|&l| self.nodes[l.0].depth).max().unwrap_or(0)
    }

    /// Names from the depth-1 ancestor down to the leaf, inclusive.
    pub fn ancestor_path(&self, class_index: usize) -> Result<Vec<String>, HierarchyError> {
        let mut cur = self.leaf(class_index)?;
        let mut names = Vec::with_capacity(self.node(cur).depth);
        while cur != self.root_id {
            let node = self.node(cur);
            names.push(node.name.clone());
            cur = node.parent.expect("non-root node has a parent");
        }
        names.reverse();
        Ok(names)
    }

    /// All label paths in class order; feeding them back to [`build_tree`]
    /// reproduces this tree.
    pub fn label_paths(&self) -> Vec<LabelPath> {
        (0..self.num_classes())
            .map(|c| (c, self.ancestor_path(c).expect("class in range")))
            .collect()
    }

    /// The ancestor of a leaf at `depth`; `depth == leaf depth` gives the leaf.
    pub fn ancestor_at_depth(&self, class_index: usize, depth: usize) -> Result<NodeId, HierarchyError> {
        let mut cur = self.leaf(class_index)?;
        let leaf_depth = self.node(cur).depth;
        if depth == 0 || depth > leaf_depth {
            return Err(HierarchyError::DepthOutOfRange { depth, leaf_depth });
        }
        while self.node(cur).depth > depth {
            cur = self.node(cur).parent.expect("non-root node has a parent");
        }
        Ok(cur)
    }

    /// `ancestor_path` joined by `/`, the key format of description files.
    pub fn path_key(&self, class_index: usize) -> Result<String, HierarchyError> {
        Ok(self.ancestor_path(class_index)?.join("/"))
    }
}

/// Rebuilds the tree from the last `levels` names of each leaf's path.
pub fn truncate_bottom_up(tree: &LabelTree, levels: usize) -> Result<LabelTree, HierarchyError> {
    if levels == 0 {
        return Err(HierarchyError::InvalidLevels);
    }
    let paths: Vec<LabelPath> = tree
        .label_paths()
        .into_iter()
        .map(|(c, path)| {
            let keep = levels.min(path.len());
            (c, path[path.len() - keep..].to_vec())
        })
        .collect();
    build_tree(&paths).map_err(|e| match e {
        HierarchyError::DuplicatePath(a, b) => HierarchyError::LeafCollision(a, b),
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Piece<'a> {
    Text(&'a str),
    Full,
    Layer(usize),
}

/// Sentence template with `{label}` and `{label[Lk]}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TemplateSpec {
    pub pattern: String,
}

impl Default for TemplateSpec {
    fn default() -> Self {
        Self::new("It contains {label} news.")
    }
}

impl TemplateSpec {
    pub fn new(pattern: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
        }
    }

    fn pieces(&self) -> Result<Vec<Piece<'_>>, HierarchyError> {
        let s = self.pattern.as_str();
        let mut out = Vec::new();
        let mut rest = 0;
        let mut i = 0;
        while let Some(off) = s[i..].find("{label") {
            let start = i + off;
            let tail = &s[start + "{label".len()..];
            let (piece, len) = if tail.starts_with('}') {
                (Piece::Full, "{label}".len())
            } else if let Some(inner) = tail.strip_prefix("[L") {
                let close = inner.find("]}").ok_or(HierarchyError::MalformedTemplate(start))?;
                let k: usize = inner[..close]
                    .parse()
                    .map_err(|_| HierarchyError::MalformedTemplate(start))?;
                if k == 0 {
                    return Err(HierarchyError::MalformedTemplate(start));
                }
                (Piece::Layer(k), "{label[L".len() + close + "]}".len())
            } else {
                // Not a placeholder; keep the text.
                i = start + 1;
                continue;
            };
            if start > rest {
                out.push(Piece::Text(&s[rest..start]));
            }
            out.push(piece);
            rest = start + len;
            i = rest;
        }
        if rest < s.len() {
            out.push(Piece::Text(&s[rest..]));
        }
        Ok(out)
    }

    /// Renders the template for a leaf whose ancestor path is `path`.
    pub fn render(&self, class_index: usize, path: &[String]) -> Result<String, HierarchyError> {
        let mut text = String::new();
        for piece in self.pieces()? {
            match piece {
                Piece::Text(t) => text.push_str(t),
                Piece::Full => text.push_str(&path.join(PATH_JOIN)),
                Piece::Layer(k) => match path.get(k - 1) {
                    Some(name) => text.push_str(name),
                    None => {
                        return Err(HierarchyError::UnresolvedPlaceholder {
                            placeholder: format!("{{label[L{k}]}}"),
                            class: class_index,
                        })
                    }
                },
            }
        }
        Ok(text)
    }
}

/// Label sentence for one class. An override, when present, is returned verbatim.
pub fn label_sentence(
    tree: &LabelTree,
    class_index: usize,
    template: &TemplateSpec,
    overrides: Option<&BTreeMap<usize, String>>,
) -> Result<String, HierarchyError> {
    let path = tree.ancestor_path(class_index)?;
    if let Some(text) = overrides.and_then(|o| o.get(&class_index)) {
        return Ok(text.clone());
    }
    template.render(class_index, &path)
}

/// Resolves a description map keyed by `/`-joined label paths to class indices.
pub fn resolve_descriptions(
    tree: &LabelTree,
    by_path: &BTreeMap<String, String>,
) -> Result<BTreeMap<usize, String>, HierarchyError> {
    let index: HashMap<String, usize> = (0..tree.num_classes())
        .map(|c| (tree.path_key(c).expect("class in range"), c))
        .collect();
    by_path
        .iter()
        .map(|(key, text)| {
            index
                .get(key)
                .map(|&c| (c, text.clone()))
                .ok_or_else(|| HierarchyError::UnknownDescriptionPath(key.clone()))
        })
        .collect()
}

/// Reads a JSON description file (`{"a/b/c": "text", ...}`) and resolves it.
pub fn load_descriptions(tree: &LabelTree, path: &Path) -> Result<BTreeMap<usize, String>, HierarchyError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| HierarchyError::DescriptionFile(format!("{}: {e}", path.display())))?;
    let by_path: BTreeMap<String, String> =
        serde_json::from_str(&raw).map_err(|e| HierarchyError::DescriptionFile(format!("{}: {e}", path.display())))?;
    resolve_descriptions(tree, &by_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(c: usize, names: &[&str]) -> LabelPath {
        (c, names.iter().map(|s| s.to_string()).collect())
    }

    fn news_tree() -> LabelTree {
        build_tree(&[
            p(0, &["Computer", "System", "IBM", "PC", "Hardware"]),
            p(1, &["Computer", "System", "Mac", "Hardware"]),
            p(2, &["recreation", "sport", "hockey"]),
            p(3, &["recreation", "sport", "baseball"]),
            p(4, &["science"]),
        ])
        .unwrap()
    }

    #[test]
    fn shared_prefixes_share_nodes() {
        let t = build_tree(&[
            p(0, &["recreation", "sport", "hockey"]),
            p(1, &["recreation", "sport", "baseball"]),
        ])
        .unwrap();
        // root + recreation + sport + 2 leaves
        assert_eq!(t.nodes().len(), 5);
        let (a, b) = (t.leaf(0).unwrap(), t.leaf(1).unwrap());
        assert_eq!(t.node(a).depth, 3);
        assert_eq!(t.node(b).depth, 3);
        assert_eq!(t.parent(a), t.parent(b));
        assert_eq!(t.node(t.root()).depth, 0);
        assert!(t.node(t.root()).parent.is_none());
    }

    #[test]
    fn single_leaf_tree() {
        let t = build_tree(&[p(0, &["science"])]).unwrap();
        assert_eq!(t.leaf_depth(0).unwrap(), 1);
        assert_eq!(t.ancestor_path(0).unwrap(), vec!["science"]);
    }

    #[test]
    fn deep_leaf_path() {
        let t = news_tree();
        assert_eq!(t.leaf_depth(0).unwrap(), 5);
        assert_eq!(
            t.ancestor_path(0).unwrap(),
            vec!["Computer", "System", "IBM", "PC", "Hardware"]
        );
        let leaf = t.leaf(0).unwrap();
        assert_eq!(t.node(leaf).name, "Hardware");
    }

    #[test]
    fn build_errors() {
        assert_eq!(build_tree(&[]), Err(HierarchyError::EmptyTaxonomy));
        assert_eq!(
            build_tree(&[p(0, &["a"]), p(0, &["b"])]),
            Err(HierarchyError::DuplicateClass(0))
        );
        assert_eq!(
            build_tree(&[p(0, &["a"]), p(2, &["b"])]),
            Err(HierarchyError::MissingClass {
                expected: 2,
                missing: 1
            })
        );
        assert_eq!(build_tree(&[p(0, &[])]), Err(HierarchyError::EmptyPath(0)));
        assert_eq!(
            build_tree(&[p(0, &["a"]), p(1, &["a", "b"])]),
            Err(HierarchyError::PrefixConflict(0))
        );
        assert_eq!(
            build_tree(&[p(0, &["a", "b"]), p(1, &["a"])]),
            Err(HierarchyError::PrefixConflict(1))
        );
        assert_eq!(
            build_tree(&[p(0, &["a", "b"]), p(1, &["a", "b"])]),
            Err(HierarchyError::DuplicatePath(0, 1))
        );
    }

    #[test]
    fn names_are_case_sensitive() {
        let t = build_tree(&[p(0, &["Sport", "x"]), p(1, &["sport", "y"])]).unwrap();
        assert_ne!(t.ancestor_at_depth(0, 1), t.ancestor_at_depth(1, 1));
    }

    #[test]
    fn class_order_follows_declaration() {
        let t = build_tree(&[p(1, &["b"]), p(0, &["a"])]).unwrap();
        assert_eq!(t.ancestor_path(0).unwrap(), vec!["a"]);
        assert_eq!(t.ancestor_path(1).unwrap(), vec!["b"]);
    }

    #[test]
    fn ancestors_at_depth() {
        let t = news_tree();
        let leaf = t.leaf(0).unwrap();
        assert_eq!(t.ancestor_at_depth(0, 5).unwrap(), leaf);
        assert_eq!(t.node(t.ancestor_at_depth(0, 1).unwrap()).name, "Computer");
        assert_eq!(Some(t.ancestor_at_depth(0, 4).unwrap()), t.parent(leaf));
        assert_eq!(
            t.ancestor_at_depth(4, 2),
            Err(HierarchyError::DepthOutOfRange {
                depth: 2,
                leaf_depth: 1
            })
        );
        assert!(t.ancestor_at_depth(0, 0).is_err());
        assert_eq!(t.ancestor_at_depth(9, 1), Err(HierarchyError::UnknownClass(9)));
        assert_eq!(t.ancestor_path(9), Err(HierarchyError::UnknownClass(9)));
    }

    #[test]
    fn sentences_from_templates() {
        let t = news_tree();
        let tpl = TemplateSpec::new("It contains {label} news.");
        assert_eq!(
            label_sentence(&t, 2, &tpl, None).unwrap(),
            "It contains recreation, sport, hockey news."
        );
        assert_eq!(
            label_sentence(&t, 0, &tpl, None).unwrap(),
            "It contains Computer, System, IBM, PC, Hardware news."
        );
        let dbp = build_tree(&[p(0, &["Place", "Village"])]).unwrap();
        let tpl2 = TemplateSpec::new("It contains {label[L2]} under {label[L1]} category.");
        assert_eq!(
            label_sentence(&dbp, 0, &tpl2, None).unwrap(),
            "It contains Village under Place category."
        );
        assert_eq!(
            label_sentence(&t, 4, &tpl2, None),
            Err(HierarchyError::UnresolvedPlaceholder {
                placeholder: "{label[L2]}".into(),
                class: 4
            })
        );
    }

    #[test]
    fn override_is_verbatim() {
        let t = news_tree();
        let mut o = BTreeMap::new();
        o.insert(3, "custom description".to_string());
        let tpl = TemplateSpec::default();
        assert_eq!(label_sentence(&t, 3, &tpl, Some(&o)).unwrap(), "custom description");
        assert_ne!(label_sentence(&t, 2, &tpl, Some(&o)).unwrap(), "custom description");
    }

    #[test]
    fn malformed_and_literal_braces() {
        let t = news_tree();
        assert!(matches!(
            TemplateSpec::new("{label[Lx]}").render(0, &t.ancestor_path(0).unwrap()),
            Err(HierarchyError::MalformedTemplate(0))
        ));
        let s = TemplateSpec::new("{x} {labels} {label}")
            .render(4, &t.ancestor_path(4).unwrap())
            .unwrap();
        assert_eq!(s, "{x} {labels} science");
    }

    #[test]
    fn truncation_rules() {
        let t = news_tree();
        let two = truncate_bottom_up(&t, 2).unwrap();
        assert_eq!(two.ancestor_path(0).unwrap(), vec!["PC", "Hardware"]);
        assert_eq!(two.ancestor_path(4).unwrap(), vec!["science"]);
        assert_eq!(two.num_classes(), t.num_classes());

        let same = truncate_bottom_up(&t, 7).unwrap();
        assert_eq!(same.label_paths(), t.label_paths());

        // "Hardware" appears under two branches: flattening collides.
        assert_eq!(truncate_bottom_up(&t, 1), Err(HierarchyError::LeafCollision(0, 1)));
        assert_eq!(truncate_bottom_up(&t, 0), Err(HierarchyError::InvalidLevels));
    }

    #[test]
    fn flat_truncation() {
        let t = build_tree(&[
            p(0, &["recreation", "sport", "hockey"]),
            p(1, &["recreation", "sport", "baseball"]),
            p(2, &["science", "space"]),
        ])
        .unwrap();
        let flat = truncate_bottom_up(&t, 1).unwrap();
        for c in 0..3 {
            assert_eq!(flat.leaf_depth(c).unwrap(), 1);
        }
        assert_eq!(flat.ancestor_path(2).unwrap(), vec!["space"]);
    }

    #[test]
    fn descriptions_resolve_by_path_key() {
        let t = news_tree();
        let mut m = BTreeMap::new();
        m.insert("recreation/sport/hockey".to_string(), "ice".to_string());
        let r = resolve_descriptions(&t, &m).unwrap();
        assert_eq!(r.get(&2).map(String::as_str), Some("ice"));
        m.insert("nope".into(), "x".into());
        assert!(matches!(
            resolve_descriptions(&t, &m),
            Err(HierarchyError::UnknownDescriptionPath(_))
        ));
    }

    /// Random taxonomies: a set of distinct leaf paths with no path a prefix of another.
    fn taxonomy() -> impl Strategy<Value = Vec<LabelPath>> {
        prop::collection::vec(prop::collection::vec(0u8..3, 1..5), 1..12).prop_map(|raw| {
            let mut paths: Vec<Vec<String>> = Vec::new();
            for r in raw {
                // Leaf names carry the full prefix, which keeps leaves distinct
                // and never a prefix of another path.
                let mut names: Vec<String> = r.iter().map(|x| format!("n{x}")).collect();
                let leaf = format!("leaf{}", r.iter().map(|x| x.to_string()).collect::<String>());
                names.push(leaf);
                if !paths.contains(&names) {
                    paths.push(names);
                }
            }
            paths.into_iter().enumerate().collect()
        })
    }

    proptest! {
        #[test]
        fn build_then_paths_round_trips(paths in taxonomy()) {
            let t = build_tree(&paths).unwrap();
            prop_assert_eq!(t.label_paths(), paths);
        }

        #[test]
        fn truncation_composes(paths in taxonomy(), l1 in 1usize..6, l2 in 1usize..6) {
            let t = build_tree(&paths).unwrap();
            let direct = truncate_bottom_up(&t, l1.min(l2));
            let chained = truncate_bottom_up(&t, l1).and_then(|x| truncate_bottom_up(&x, l2));
            match (direct, chained) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a.label_paths(), b.label_paths()),
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(false, "mismatch: {:?} vs {:?}", a.is_ok(), b.is_ok()),
            }
        }

        #[test]
        fn ancestors_lie_on_root_chain(paths in taxonomy()) {
            let t = build_tree(&paths).unwrap();
            for c in 0..t.num_classes() {
                let leaf_depth = t.leaf_depth(c).unwrap();
                for d in 1..=leaf_depth {
                    let mut cur = t.ancestor_at_depth(c, d).unwrap();
                    prop_assert_eq!(t.node(cur).depth, d);
                    let mut steps = 0;
                    while let Some(par) = t.parent(cur) {
                        cur = par;
                        steps += 1;
                    }
                    prop_assert_eq!(cur, t.root());
                    prop_assert_eq!(steps, d);
                }
            }
        }
    }
}

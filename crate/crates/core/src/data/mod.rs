//! Dataset ingestion and splitting.
//!
//! Two directory conventions are supported (see the README for the exact
//! layouts):
//!
//! - category folders: `root/{train,test}/<category>/*.png`, labels derived
//!   from the category name (`good`/`healthy`/`hy` are normal);
//! - manifest: `root/train.tsv` and `root/test.tsv`, one record per line:
//!   `relative-path <TAB> label <TAB> category <TAB> optional-mask-path`.
//!
//! Train splits may only contain normal items; [`Dataset::train`] enforces
//! this at construction.

mod store;
mod synthetic;

pub use store::ImageStore;
pub use synthetic::{
    generate_synthetic_corpus, inject_defect, render_anomaly, render_kernel, DefectType,
    SyntheticParams,
};

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};
use crate::rng;

pub const LABEL_NORMAL: u8 = 0;
pub const LABEL_ANOMALOUS: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// One dataset record.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub path: PathBuf,
    pub label: u8,
    pub category: String,
    pub mask_path: Option<PathBuf>,
}

impl Item {
    /// Stable identifier used in score tables and reports.
    pub fn id(&self) -> String {
        self.path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.path.display().to_string())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub split: Split,
}

impl Dataset {
    /// Build a train split; rejects any anomalous item.
    pub fn train(items: Vec<Item>) -> Result<Self> {
        if let Some(bad) = items.iter().find(|i| i.label != LABEL_NORMAL) {
            return Err(CoreError::Data(format!(
                "train split must contain only normal items, found label {} at {}",
                bad.label,
                bad.path.display()
            )));
        }
        Ok(Self { items, split: Split::Train })
    }

    pub fn test(items: Vec<Item>) -> Self {
        Self { items, split: Split::Test }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.items.iter().filter(|i| i.label == LABEL_ANOMALOUS).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetLayout {
    CategoryFolders,
    Manifest,
}

fn normal_category(category: &str) -> bool {
    matches!(category.to_ascii_lowercase().as_str(), "good" | "healthy" | "hy")
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CoreError::Data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file() && p.extension().is_some_and(|ext| ext.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn load_category_split(root: &Path, split: &str) -> Result<Vec<Item>> {
    let split_dir = root.join(split);
    if !split_dir.is_dir() {
        return Err(CoreError::Data(format!("missing split directory {}", split_dir.display())));
    }
    let mut categories: Vec<PathBuf> = std::fs::read_dir(&split_dir)
        .map_err(|e| CoreError::Data(format!("cannot read {}: {e}", split_dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    categories.sort();
    let mut items = Vec::new();
    for cat_dir in categories {
        let category = cat_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let label = if normal_category(&category) { LABEL_NORMAL } else { LABEL_ANOMALOUS };
        for path in list_pngs(&cat_dir)? {
            // Optional parallel mask tree root/masks/<split>/<category>/<name>.
            let mask = root
                .join("masks")
                .join(split)
                .join(&category)
                .join(path.file_name().unwrap());
            items.push(Item {
                path,
                label,
                category: category.clone(),
                mask_path: mask.is_file().then_some(mask),
            });
        }
    }
    Ok(items)
}

fn parse_manifest(root: &Path, name: &str) -> Result<Vec<Item>> {
    let path = root.join(name);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CoreError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut items = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(CoreError::Data(format!(
                "{}:{}: expected at least 3 tab-separated fields",
                path.display(),
                lineno + 1
            )));
        }
        let label: u8 = fields[1].parse().map_err(|_| {
            CoreError::Data(format!("{}:{}: bad label {:?}", path.display(), lineno + 1, fields[1]))
        })?;
        if label > 1 {
            return Err(CoreError::Data(format!(
                "{}:{}: label must be 0 or 1",
                path.display(),
                lineno + 1
            )));
        }
        let mask_path = fields
            .get(3)
            .filter(|s| !s.is_empty())
            .map(|s| root.join(s));
        items.push(Item {
            path: root.join(fields[0]),
            label,
            category: fields[2].to_string(),
            mask_path,
        });
    }
    Ok(items)
}

fn check_readable(items: &[Item]) -> Result<()> {
    for item in items {
        if !item.path.is_file() {
            return Err(CoreError::Data(format!("missing image file {}", item.path.display())));
        }
        if let Some(mask) = &item.mask_path {
            if !mask.is_file() {
                return Err(CoreError::Data(format!("missing mask file {}", mask.display())));
            }
        }
    }
    Ok(())
}

/// Load the train and test splits of a dataset directory.
pub fn load_dataset(root: &Path, layout: DatasetLayout) -> Result<(Dataset, Dataset)> {
    if !root.is_dir() {
        return Err(CoreError::Data(format!("dataset root {} does not exist", root.display())));
    }
    let (train_items, test_items) = match layout {
        DatasetLayout::CategoryFolders => (
            load_category_split(root, "train")?,
            load_category_split(root, "test")?,
        ),
        DatasetLayout::Manifest => {
            (parse_manifest(root, "train.tsv")?, parse_manifest(root, "test.tsv")?)
        }
    };
    if train_items.is_empty() && test_items.is_empty() {
        return Err(CoreError::Data(format!("dataset at {} is empty", root.display())));
    }
    check_readable(&train_items)?;
    check_readable(&test_items)?;
    Ok((Dataset::train(train_items)?, Dataset::test(test_items)))
}

/// All items of a dataset directory as one unsplit pool, for re-splitting
/// under a subset scheme.
pub fn load_pool(root: &Path, layout: DatasetLayout) -> Result<Vec<Item>> {
    if !root.is_dir() {
        return Err(CoreError::Data(format!("dataset root {} does not exist", root.display())));
    }
    let mut items = match layout {
        DatasetLayout::CategoryFolders => {
            let mut all = load_category_split(root, "train")?;
            all.extend(load_category_split(root, "test")?);
            all
        }
        DatasetLayout::Manifest => {
            let mut all = parse_manifest(root, "train.tsv")?;
            all.extend(parse_manifest(root, "test.tsv")?);
            all
        }
    };
    if items.is_empty() {
        return Err(CoreError::Data(format!("dataset at {} is empty", root.display())));
    }
    check_readable(&items)?;
    items.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(items)
}

/// Which categories count as normal vs anomalous.
#[derive(Debug, Clone)]
pub struct SubsetScheme {
    pub name: String,
    pub normal_categories: BTreeSet<String>,
    pub anomalous_categories: BTreeSet<String>,
}

fn tag_set(tags: &[&str]) -> BTreeSet<String> {
    tags.iter().map(|t| t.to_ascii_lowercase()).collect()
}

impl SubsetScheme {
    /// Only healthy grains are normal.
    pub fn set1() -> Self {
        Self {
            name: "set1".into(),
            normal_categories: tag_set(&["hy", "good", "healthy"]),
            anomalous_categories: tag_set(&["sd", "fs", "bp", "hd", "my", "bn", "ap", "im"]),
        }
    }

    /// Healthy plus the edible damaged categories are normal.
    pub fn set2() -> Self {
        Self {
            name: "set2".into(),
            normal_categories: tag_set(&["hy", "good", "healthy", "bn", "ap", "bp", "hd"]),
            anomalous_categories: tag_set(&["sd", "fs", "my", "im"]),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "set1" => Ok(Self::set1()),
            "set2" => Ok(Self::set2()),
            other => Err(CoreError::Config(format!("unknown subset scheme {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.normal_categories.intersection(&self.anomalous_categories).next().is_some() {
            return Err(CoreError::Config(
                "scheme normal and anomalous categories must be disjoint".into(),
            ));
        }
        Ok(())
    }

    fn label_of(&self, category: &str) -> Result<u8> {
        let cat = category.to_ascii_lowercase();
        if self.normal_categories.contains(&cat) {
            Ok(LABEL_NORMAL)
        } else if self.anomalous_categories.contains(&cat) {
            Ok(LABEL_ANOMALOUS)
        } else {
            Err(CoreError::Config(format!(
                "category {category:?} is not covered by scheme {}",
                self.name
            )))
        }
    }
}

/// Relabel items under a scheme and split them: normals are stratified per
/// category at `split_ratio` into train/test (floor rounding, assignment by
/// seeded shuffle order), anomalous items all go to test.
pub fn apply_subset_scheme(
    items: &[Item],
    scheme: &SubsetScheme,
    split_ratio: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(CoreError::Config("split_ratio must lie in (0, 1)".into()));
    }
    scheme.validate()?;

    let mut normals_by_cat: BTreeMap<String, Vec<Item>> = BTreeMap::new();
    let mut anomalies: Vec<Item> = Vec::new();
    for item in items {
        let label = scheme.label_of(&item.category)?;
        let relabeled = Item { label, ..item.clone() };
        if label == LABEL_NORMAL {
            normals_by_cat.entry(item.category.to_ascii_lowercase()).or_default().push(relabeled);
        } else {
            anomalies.push(relabeled);
        }
    }

    let mut train_items = Vec::new();
    let mut test_items = Vec::new();
    for (cat_idx, (_cat, mut cat_items)) in normals_by_cat.into_iter().enumerate() {
        let mut rng = rng::stream(seed, &[0x5B17, cat_idx as u64]);
        rng::shuffle(&mut rng, &mut cat_items);
        let n_train = (split_ratio * cat_items.len() as f64).floor() as usize;
        for (idx, item) in cat_items.into_iter().enumerate() {
            if idx < n_train {
                train_items.push(item);
            } else {
                test_items.push(item);
            }
        }
    }
    test_items.extend(anomalies);
    Ok((Dataset::train(train_items)?, Dataset::test(test_items)))
}

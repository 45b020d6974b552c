use partnet_core::data::{generate_dataset, generate_shape, Category, ShapeRecord};
use partnet_core::geom::{max_nn_residual, PointCloud, Vec3};
use partnet_core::hierarchy::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn shapes(count: usize, seed: u64) -> Vec<ShapeRecord> {
    generate_dataset(&Category::ALL, count, seed, 512).unwrap()
}

fn part_cloud(r: &ShapeRecord, id: usize) -> PointCloud {
    let rows: Vec<usize> = (0..r.len()).filter(|&i| r.instance_label[i] == id).collect();
    r.cloud.subset(&rows)
}

#[test]
fn generated_trees_validate_and_reproduce_labels() {
    for r in shapes(60, 3) {
        let h = r.hierarchy(&BuildOptions::default()).unwrap();
        let report = validate(&h, &r.cloud, Some(1e-6));
        assert!(report.is_ok(), "{}: {:?}", h.shape_id, report.violations);
        let labels = expand_labels(&h, &r.cloud).unwrap();
        let mismatches = labels.iter().filter(|(i, p)| r.instance_label[*i] != *p).count();
        assert_eq!(mismatches, 0);
        assert_eq!(labels.len(), r.len());
        let back = deserialize(&serialize(&h), &h.shape_id, &r.instance_label).unwrap();
        assert_eq!(back, h);
        let units = r.parts.len() - r.groups.iter().map(|g| g.members.len() - 1).sum::<usize>();
        assert_eq!(h.root.node_count(), 2 * units - 1 + r.groups.len());
    }
}

#[test]
fn recorded_group_copies_are_exact() {
    for r in shapes(30, 4) {
        for g in &r.groups {
            let gen = part_cloud(&r, g.members[0]);
            for (k, &m) in g.members.iter().enumerate().skip(1) {
                let copy = g.spec.apply(k, &gen);
                let member = part_cloud(&r, m);
                let residual = max_nn_residual(&copy, &member).unwrap().max(max_nn_residual(&member, &copy).unwrap());
                assert!(residual <= 1e-6, "{:?} member {m}: {residual}", r.category);
            }
        }
    }
}

#[test]
fn detection_recovers_generated_groups() {
    for r in shapes(30, 5) {
        let parts = parts_from_labels(&r.cloud, &r.instance_label).unwrap();
        let found = detect_symmetry_groups(&parts, &DetectOptions::default()).unwrap();
        let key = |members: &[usize], fold: usize| {
            let mut sorted = members.to_vec();
            sorted.sort_unstable();
            (members[0], sorted, fold)
        };
        let mut expected: Vec<_> = r.groups.iter().map(|g| key(&g.members, g.spec.fold)).collect();
        let mut got: Vec<_> = found.iter().map(|g| key(&g.members, g.spec.fold)).collect();
        expected.sort();
        got.sort();
        assert_eq!(got, expected, "{:?} seed {}", r.category, r.seed);
        for g in &found {
            let gen = part_cloud(&r, g.members[0]);
            for (k, &m) in g.members.iter().enumerate().skip(1) {
                let copy = g.spec.apply(k, &gen);
                let member = part_cloud(&r, m);
                assert!(max_nn_residual(&member, &copy).unwrap() <= 0.02);
            }
        }
    }
}

fn nth_mut<'a>(n: &'a mut HierNode, k: &mut usize) -> Option<&'a mut HierNode> {
    if *k == 0 {
        return Some(n);
    }
    *k -= 1;
    for c in n.children.iter_mut() {
        if let Some(found) = nth_mut(c, k) {
            return Some(found);
        }
    }
    None
}

fn pick<'a>(h: &'a mut Hierarchy, rng: &mut ChaCha8Rng, want: impl Fn(&HierNode) -> bool) -> Option<&'a mut HierNode> {
    let matching: Vec<usize> = h.root.preorder().iter().enumerate().filter(|(_, n)| want(n)).map(|(i, _)| i).collect();
    if matching.is_empty() {
        return None;
    }
    let mut k = matching[rng.random_range(0..matching.len())];
    nth_mut(&mut h.root, &mut k)
}

/// Applies one random structural corruption; returns its name.
fn mutate(h: &mut Hierarchy, rng: &mut ChaCha8Rng, which: usize) -> Option<&'static str> {
    match which {
        0 => {
            let n = pick(h, rng, |n| n.kind == NodeKind::Adjacency)?;
            n.children.swap(0, 1);
            Some("swap children")
        }
        1 => {
            let n = pick(h, rng, |n| n.kind == NodeKind::Adjacency)?;
            let p = n.children[0].point_ids[0];
            let right = &mut n.children[1];
            right.point_ids.push(p);
            right.point_ids.sort_unstable();
            Some("shared point")
        }
        2 => {
            let n = pick(h, rng, |n| n.kind == NodeKind::Leaf && n.point_ids.len() > 1)?;
            let i = rng.random_range(0..n.point_ids.len());
            n.point_ids.remove(i);
            Some("dropped point")
        }
        3 => {
            let n = pick(h, rng, |n| n.kind == NodeKind::Symmetry)?;
            n.symmetry.as_mut().unwrap().fold += 1;
            Some("fold changed")
        }
        4 => {
            let n = pick(h, rng, |n| n.kind == NodeKind::Symmetry)?;
            let spec = n.symmetry.as_mut().unwrap();
            if spec.kind == partnet_core::geom::SymmetryKind::Translational {
                spec.step *= 1.5;
                Some("step changed")
            } else {
                spec.anchor += Vec3::new(0.05, 0.05, 0.05);
                Some("anchor moved")
            }
        }
        5 => {
            let n = pick(h, rng, |n| n.kind == NodeKind::Leaf)?;
            n.part_ids[0] += 1000;
            Some("part id changed")
        }
        6 => {
            let n = pick(h, rng, |n| n.kind == NodeKind::Adjacency)?;
            let spec = partnet_core::geom::SymmetrySpec::reflective(Vec3::zeros(), Vec3::x()).unwrap();
            n.symmetry = Some(spec);
            Some("payload on adjacency")
        }
        7 => {
            let n = pick(h, rng, |n| n.point_ids.len() > 2)?;
            n.point_ids.swap(0, 1);
            Some("unsorted points")
        }
        8 => {
            let n = pick(h, rng, |n| n.kind == NodeKind::Symmetry)?;
            n.kind = NodeKind::Adjacency;
            Some("kind changed")
        }
        _ => {
            let n = pick(h, rng, |n| n.kind == NodeKind::Adjacency)?;
            n.children.pop();
            Some("missing child")
        }
    }
}

#[test]
fn corrupted_trees_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut caught = 0;
    let mut i = 0u64;
    while caught < 100 {
        let r = generate_shape(Category::ALL[(i % 3) as usize], 1000 + i, 256).unwrap();
        i += 1;
        let mut h = r.hierarchy(&BuildOptions::default()).unwrap();
        let which = rng.random_range(0..10);
        let Some(what) = mutate(&mut h, &mut rng, which) else { continue };
        let report = validate(&h, &r.cloud, Some(1e-6));
        assert!(!report.is_ok(), "mutation '{what}' on {} went unnoticed", h.shape_id);
        caught += 1;
    }
}

#[test]
fn malformed_documents_are_rejected() {
    let r = generate_shape(Category::Table, 8, 128).unwrap();
    let h = r.hierarchy(&BuildOptions::default()).unwrap();
    let text = serialize(&h);
    assert!(deserialize(&text[..text.len() / 2], "t", &r.instance_label).is_err());
    let extra = text.replacen('{', "{\"bogus\": 1,", 1);
    assert!(deserialize(&extra, "t", &r.instance_label).is_err());
    let mut wrong = r.instance_label.clone();
    wrong[0] = 99;
    assert!(deserialize(&text, "t", &wrong).is_err() || deserialize(&text, "t", &wrong).unwrap() != h);
}

#[test]
fn build_rejects_bad_groups() {
    let r = generate_shape(Category::Chair, 2, 256).unwrap();
    let parts = parts_from_labels(&r.cloud, &r.instance_label).unwrap();
    let mut groups = r.groups.clone();
    groups[0].members.reverse();
    assert!(build_hierarchy("c", &parts, &groups, &BuildOptions::default()).is_err());
    assert!(build_hierarchy("c", &[], &[], &BuildOptions::default()).is_err());
}

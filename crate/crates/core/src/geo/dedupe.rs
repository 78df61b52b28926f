use super::{KdTree, ProjectedPoint};

/// Spatial DBSCAN with a minimum cluster size of one, keeping one point per
/// density cluster.
///
/// With a minimum size of one every point is a core point, so the clusters
/// are the connected components of the "within `eps`" graph. The kept member
/// of each component is the one closest to the component centroid (lowest
/// position on ties). Returned positions are ascending, i.e. in input order.
pub fn dbscan_dedupe(points: &[ProjectedPoint], eps: f64) -> Vec<usize> {
    if points.is_empty() {
        return Vec::new();
    }
    let tree = KdTree::new(points.iter().map(|p| [p.x, p.y]).collect());
    let mut component = vec![usize::MAX; points.len()];
    let mut kept = Vec::new();
    let mut stack = Vec::new();
    let mut members = Vec::new();

    for seed in 0..points.len() {
        if component[seed] != usize::MAX {
            continue;
        }
        let label = kept.len();
        component[seed] = label;
        members.clear();
        stack.push(seed);
        while let Some(i) = stack.pop() {
            members.push(i);
            for j in tree.within([points[i].x, points[i].y], eps) {
                if component[j] == usize::MAX {
                    component[j] = label;
                    stack.push(j);
                }
            }
        }
        let n = members.len() as f64;
        let cx = members.iter().map(|&i| points[i].x).sum::<f64>() / n;
        let cy = members.iter().map(|&i| points[i].y).sum::<f64>() / n;
        let centroid = ProjectedPoint::new(cx, cy);
        let best = members
            .iter()
            .copied()
            .min_by(|&a, &b| {
                points[a]
                    .distance_squared(&centroid)
                    .total_cmp(&points[b].distance_squared(&centroid))
                    .then(a.cmp(&b))
            })
            .expect("component has at least its seed");
        kept.push(best);
    }
    kept.sort_unstable();
    kept
}

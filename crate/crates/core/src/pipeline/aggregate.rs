//! Multi-modal proposal aggregation: blacklist filtering of camera
//! proposals, concatenation and BEV NMS deduplication. Boxes are never
//! modified here, only filtered.

use crate::geometry::nms_bev;

use super::{Detection, Proposal};

/// Drop camera proposals whose argmax class is blacklisted, concatenate
/// with the LiDAR proposals and deduplicate by BEV NMS.
pub fn aggregate_proposals(
    lidar: &[Detection],
    camera: &[Proposal],
    blacklist: &[usize],
    nms_iou: f64,
) -> Vec<Proposal> {
    let mut pool: Vec<Proposal> = lidar
        .iter()
        .map(|d| Proposal {
            detection: d.clone(),
            camera_token: None,
        })
        .collect();
    pool.extend(
        camera
            .iter()
            .filter(|p| !blacklist.contains(&p.detection.argmax_class()))
            .cloned(),
    );
    let scored: Vec<(crate::geometry::Box3D, f64)> = pool
        .iter()
        .map(|p| (p.detection.box3d, p.detection.score))
        .collect();
    nms_bev(&scored, nms_iou)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{bev_iou, Box3D};
    use crate::pipeline::Provenance;
    use nalgebra::Vector3;
    use ndarray::Array1;

    fn det(x: f64, y: f64, class: usize, score: f64, prov: Provenance) -> Detection {
        let mut probs = Array1::zeros(6);
        probs[class] = score;
        Detection::new(
            Box3D::new(Vector3::new(x, y, 0.5), Vector3::new(2.0, 2.0, 1.0), 0.0).unwrap(),
            probs,
            prov,
        )
    }

    fn cam_proposal(d: Detection) -> Proposal {
        Proposal {
            camera_token: Some(Array1::zeros(4)),
            detection: d,
        }
    }

    #[test]
    fn blacklisted_camera_classes_dropped() {
        let cam = vec![
            cam_proposal(det(0.0, 0.0, 0, 0.9, Provenance::Camera { cam: 0 })),
            cam_proposal(det(10.0, 0.0, 1, 0.9, Provenance::Camera { cam: 0 })),
        ];
        let out = aggregate_proposals(&[], &cam, &[0], 0.2);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].detection.argmax_class(), 1);
        // LiDAR proposals are exempt from the blacklist.
        let lidar = vec![det(5.0, 5.0, 0, 0.8, Provenance::Lidar)];
        let out = aggregate_proposals(&lidar, &[], &[0], 0.2);
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn duplicates_keep_higher_score() {
        let lidar = vec![det(0.0, 0.0, 1, 0.95, Provenance::Lidar)];
        let cam = vec![cam_proposal(det(
            0.2,
            0.0,
            1,
            0.6,
            Provenance::Camera { cam: 0 },
        ))];
        assert!(bev_iou(&lidar[0].box3d, &cam[0].detection.box3d) > 0.2);
        let out = aggregate_proposals(&lidar, &cam, &[], 0.2);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].detection.provenance, Provenance::Lidar);
        assert!(out[0].camera_token.is_none());
    }

    #[test]
    fn disjoint_union_preserved_and_boxes_untouched() {
        let lidar = vec![det(0.0, 0.0, 1, 0.95, Provenance::Lidar)];
        let cam = vec![cam_proposal(det(
            15.0,
            0.0,
            2,
            0.6,
            Provenance::Camera { cam: 0 },
        ))];
        let out = aggregate_proposals(&lidar, &cam, &[], 0.2);
        assert_eq!(out.len(), 2);
        // Output boxes are exactly input boxes (no modification).
        for p in &out {
            let found = lidar
                .iter()
                .map(|d| &d.box3d)
                .chain(cam.iter().map(|c| &c.detection.box3d))
                .any(|b| *b == p.detection.box3d);
            assert!(found);
        }
        // No overlapping pair above the threshold survives.
        for i in 0..out.len() {
            for j in i + 1..out.len() {
                assert!(bev_iou(&out[i].detection.box3d, &out[j].detection.box3d) <= 0.2);
            }
        }
    }
}

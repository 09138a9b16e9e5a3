use udrt_core::ingest::{ChannelFrame, FrameSet, ProbeAngle};
use udrt_core::preprocess::{fuse, FusionGroup, INPUT_SIZE};

/// Member angles in degrees, written out independently of the crate.
const TABLE: [(u8, &[i16]); 5] = [
    (1, &[0]),
    (2, &[-70, 70]),
    (3, &[-70, -35, 0, 35, 70]),
    (4, &[-35, 0, 35]),
    (5, &[-55, 55]),
];

const ALL_DEGREES: [i16; 7] = [-70, -55, -35, 0, 35, 55, 70];

#[test]
fn every_group_angle_pair_matches_the_table() {
    let mut members = 0;
    let mut excluded = 0;
    for (id, table_angles) in TABLE {
        let group = FusionGroup::from_id(id).unwrap();
        for deg in ALL_DEGREES {
            let angle = ProbeAngle::from_degrees(deg).unwrap();
            let expected = table_angles.contains(&deg);
            assert_eq!(group.contains(angle), expected, "G{id} / {deg}°");
            if expected {
                members += 1;
            } else {
                excluded += 1;
            }
        }
        assert_eq!(group.channel_count(), table_angles.len(), "G{id}");
    }
    assert_eq!((members, excluded), (13, 22));
    assert!(FusionGroup::from_id(0).is_none());
    assert!(FusionGroup::from_id(6).is_none());
}

/// Each channel frame holds a constant unique to its angle, so every fused
/// plane reveals which channel it came from.
fn tagged_set() -> FrameSet {
    let (w, h) = (512, 128);
    FrameSet {
        window_index: 3,
        track_start_m: 1.5,
        track_end_m: 2.012,
        tail: false,
        frames: ALL_DEGREES
            .iter()
            .rev()
            .map(|&deg| ChannelFrame {
                angle: ProbeAngle::from_degrees(deg).unwrap(),
                track_start_m: 1.5,
                width: w,
                height: h,
                data: vec![tag(deg); w * h],
            })
            .collect(),
    }
}

fn tag(deg: i16) -> f32 {
    (f32::from(deg) + 100.0) / 200.0
}

#[test]
fn fused_planes_come_from_member_channels_in_table_order() {
    let fused = fuse(&tagged_set()).unwrap();
    assert_eq!(fused.len(), 5);
    let n = INPUT_SIZE * INPUT_SIZE;
    for (input, (id, table_angles)) in fused.iter().zip(TABLE) {
        assert_eq!(input.group.id(), id);
        assert_eq!(input.channels, table_angles.len());
        assert_eq!(input.planes.len(), table_angles.len() * n);
        assert_eq!((input.height, input.width), (INPUT_SIZE, INPUT_SIZE));
        assert_eq!(input.window_index, 3);
        let mut sorted = table_angles.to_vec();
        sorted.sort();
        for (c, deg) in sorted.iter().enumerate() {
            assert!(
                input.plane(c).iter().all(|&v| v == tag(*deg)),
                "G{id} plane {c} is not {deg}°"
            );
        }
    }
}

#[test]
fn missing_member_channel_is_reported() {
    let mut set = tagged_set();
    set.frames.retain(|f| f.angle.degrees() != 55);
    assert!(fuse(&set).is_err());
}
